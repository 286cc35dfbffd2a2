"""Loss-component ablation cells and depth sweep, each averaged over several seeds."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from ..pipeline import PipelineConfig, StreamError, accuracy, train_pipeline
from ..training import DivergenceError, Hyperparams
from .config import ConfigError, RunConfig
from .datasets import Splits

log = logging.getLogger(__name__)

_COMPONENTS = {"euclidean", "cosine", "mahalanobis", "mi"}


def cell_hyper(base: Hyperparams, cell: str) -> Hyperparams:
    """Loss toggles for a ``+``-joined cell name such as ``cosine+mahalanobis+mi``."""
    parts = {p.strip() for p in cell.lower().split("+")}
    unknown = parts - _COMPONENTS
    if unknown:
        raise ConfigError(f"unknown ablation component(s) {sorted(unknown)} in {cell!r}")
    if not parts & {"euclidean", "cosine", "mahalanobis"}:
        raise ConfigError(f"cell {cell!r} has no reconstruction loss")
    cosine = "off"
    if "cosine" in parts:
        cosine = base.cosine_mode if base.cosine_mode != "off" else "standard"
    return replace(base, euclidean="euclidean" in parts, cosine_mode=cosine, mahalanobis="mahalanobis" in parts,
                   lambda1=base.lambda1 if "mi" in parts else 0.0)


def depth_dims(input_dim: int, code_dim: int, depth: int) -> tuple[int, ...]:
    """Encoder widths for ``depth`` hidden layers shrinking geometrically to ``code_dim``."""
    if depth < 1:
        raise ConfigError("depth must be positive")
    ratio = code_dim / input_dim
    hidden = [max(code_dim, int(round(input_dim * ratio ** (k / depth)))) for k in range(1, depth)]
    return (input_dim, *hidden, code_dim)


@dataclass
class AblationRow:
    kind: str  # "cell" or "depth"
    name: str
    seeds: tuple[int, ...]
    scores: list[float | None]

    @property
    def failed(self) -> bool:
        return any(s is None for s in self.scores)

    @property
    def mean(self) -> float:
        return float("nan") if self.failed else float(np.mean(self.scores))

    @property
    def std(self) -> float:
        if self.failed:
            return float("nan")
        return float(np.std(self.scores, ddof=1)) if len(self.scores) > 1 else 0.0


def _row_config(cfg: RunConfig, kind: str, name: str, spec) -> tuple[Hyperparams, PipelineConfig]:
    if kind == "cell":
        return cell_hyper(cfg.hyper, name), cfg.pipeline
    depth = int(name.removeprefix("depth"))
    pipe = cfg.pipeline
    patch = pipe.patch_dims
    whole = pipe.whole_dims
    if pipe.use_patches:
        patch = depth_dims(spec.patch_dim, pipe.patch_dims[-1], depth)
    if whole is not None:
        whole = depth_dims(whole[0], whole[-1], depth)
    return cfg.effective_hyper(), replace(pipe, patch_dims=patch, whole_dims=whole)


def _run_one(hyper: Hyperparams, pipe: PipelineConfig, data: Splits, spec) -> float | None:
    try:
        ens = train_pipeline(data.train, data.val, spec, hyper, pipe)
    except (StreamError, DivergenceError, FloatingPointError) as err:
        log.warning("ablation run failed: %s", err)
        return None
    return accuracy(ens, data.test)


def run_ablation(cfg: RunConfig, data: Splits, jobs: int = 1) -> list[AblationRow]:
    spec = cfg.patch_spec(data.image_shape) if cfg.pipeline.use_patches else None
    rows = [AblationRow("cell", c, cfg.ablate.seeds, []) for c in cfg.ablate.cells]
    rows += [AblationRow("depth", f"depth{d}", cfg.ablate.seeds, []) for d in cfg.ablate.depths]
    if not rows:
        raise ConfigError("ablation lists no cells and no depths")
    tasks = []
    for row in rows:
        hyper, pipe = _row_config(cfg, row.kind, row.name, spec)
        tasks += [(replace(hyper, seed=s), pipe, data, spec) for s in row.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_run_one, *zip(*tasks)))
    else:
        results = [_run_one(*t) for t in tasks]
    it = iter(results)
    for row in rows:
        row.scores = [next(it) for _ in row.seeds]
    return rows


def to_csv(rows: list[AblationRow]) -> str:
    n = max(len(r.seeds) for r in rows)
    lines = [",".join(["kind", "name", "mean", "std"] + [f"seed{k}" for k in range(n)])]
    for r in rows:
        stats = ["FAILED", "FAILED"] if r.failed else [repr(r.mean), repr(r.std)]
        seeds = ["FAILED" if s is None else repr(s) for s in r.scores]
        lines.append(",".join([r.kind, r.name, *stats, *seeds]))
    return "\n".join(lines) + "\n"


def to_text(rows: list[AblationRow]) -> str:
    width = max(len(r.name) for r in rows) + 2
    out = [f"{'setting':<{width}}accuracy (%)"]
    for r in rows:
        value = "FAILED" if r.failed else f"{100 * r.mean:6.2f} +/- {100 * r.std:.2f}"
        out.append(f"{r.name:<{width}}{value}")
    return "\n".join(out) + "\n"
