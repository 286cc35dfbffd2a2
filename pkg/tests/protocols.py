"""Desk-scale experiment protocols shared by the acceptance and proxy suites."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from supcosmos.cli.config import DataConfig
from supcosmos.cli.datasets import DataError, Splits, load_dataset
from supcosmos.model import init_model
from supcosmos.pipeline import PatchSpec, PipelineConfig, accuracy, train_pipeline
from supcosmos.training import Hyperparams, grid_search_lambdas

SEEDS = (0, 1, 2)
LAMBDA1_GRID = (1.0, 10.0, 100.0, 1000.0)
EUCLIDEAN_ONLY = dict(euclidean=True, cosine_mode="off", mahalanobis=False, lambda1=0.0)
COSMOS = dict(euclidean=False, cosine_mode="standard", mahalanobis=True)

MNIST_SPEC = PatchSpec((28, 28, 1), (14, 14))
MNIST_PIPELINE = PipelineConfig()  # nine 196-dim patch streams plus the 784-dim whole image
MNIST_BASE = Hyperparams(max_iters=60, batch_size=64, lr_w=3e-3, lambda2=1e-4)
MNIST_MISSING = ("MNIST IDX files not found; set COSMOS_DATA_DIR to a directory holding "
                 "train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte, "
                 "t10k-labels-idx1-ubyte (raw or .gz)")

# Pairs (better, worse) expected from the loss-component table.
ORDERING = (
    ("cosine+mahalanobis", "euclidean"), ("cosine+mahalanobis", "cosine"), ("cosine+mahalanobis", "mahalanobis"),
    ("euclidean+mi", "euclidean"), ("cosine+mi", "cosine"), ("mahalanobis+mi", "mahalanobis"),
)


def mnist_splits(n_train: int = 2000, n_test: int = 1000) -> Splits | None:
    try:
        return load_dataset(DataConfig(dataset="mnist", n_train=n_train, n_test=n_test, val_fraction=0.1))
    except DataError:
        return None


def choose_lambda1(splits: Splits, dims, base: Hyperparams, budget: int) -> tuple[float, list]:
    """Validation grid search over lambda1 for a single COSMOS stream."""
    def factory(h):
        return init_model(list(dims), splits.train.class_count, (h.seed, 7), h.dropout_rate)

    grid = [(l1, base.lambda2) for l1 in LAMBDA1_GRID]
    best, scores = grid_search_lambdas(factory, splits.train, splits.val, grid, budget, replace(base, **COSMOS))
    return best.lambda1, scores


@dataclass
class SeedRun:
    seed: int
    fused: float
    whole: float | None
    cpu_seconds: float


def run_seeds(splits: Splits, spec: PatchSpec | None, pipe: PipelineConfig, hyper: Hyperparams,
              seeds=SEEDS) -> list[SeedRun]:
    runs = []
    for seed in seeds:
        start = time.process_time()
        ens = train_pipeline(splits.train, splits.val, spec, replace(hyper, seed=seed), pipe)
        cpu = time.process_time() - start
        whole = accuracy(ens.only(["whole"]), splits.test) if ens.whole_stream is not None else None
        runs.append(SeedRun(seed, accuracy(ens, splits.test), whole, cpu))
    return runs


def mean(values) -> float:
    return float(np.mean(list(values)))


def ordering_inversions(means: dict[str, float]) -> list[tuple[str, str, float]]:
    """Pairs where the expected-better cell scored lower, with the gap in accuracy."""
    return [(a, b, means[b] - means[a]) for a, b in ORDERING if means[a] < means[b]]


def ordering_holds(inversions, tolerance: float = 0.005) -> bool:
    return not inversions or (len(inversions) == 1 and inversions[0][2] <= tolerance)
