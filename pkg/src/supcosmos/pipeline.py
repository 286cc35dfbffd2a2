"""Patch tessellation, per-stream feature models and classifiers, sum-rule fusion."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import DataBatch
from .model import CosmosModel, extract_features, init_model, softmax
from .numeric import AdamState, adam_step, init_weights, make_rng
from .training import DivergenceError, Hyperparams, TrainReport, train

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    pass


class UntrainedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    """3x3 grid of ``patch_shape`` windows over ``image_shape`` (H, W, C)."""
    image_shape: tuple[int, int, int]
    patch_shape: tuple[int, int]

    def __post_init__(self):
        H, W, _ = self.image_shape
        h, w = self.patch_shape
        if not (0 < h <= H and 0 < w <= W):
            raise GeometryError(f"patch {self.patch_shape} does not fit image {self.image_shape}")
        if (H - h) % 2 or (W - w) % 2:
            raise GeometryError(f"image {self.image_shape} minus patch {self.patch_shape} must be even")

    @property
    def row_offsets(self) -> tuple[int, int, int]:
        H, h = self.image_shape[0], self.patch_shape[0]
        return (0, (H - h) // 2, H - h)

    @property
    def col_offsets(self) -> tuple[int, int, int]:
        W, w = self.image_shape[1], self.patch_shape[1]
        return (0, (W - w) // 2, W - w)

    @property
    def patch_dim(self) -> int:
        return self.patch_shape[0] * self.patch_shape[1] * self.image_shape[2]

    @property
    def image_dim(self) -> int:
        return int(np.prod(self.image_shape))

    def windows(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.row_offsets for c in self.col_offsets]


def extract_patches(image, spec: PatchSpec) -> list[np.ndarray]:
    """Nine flattened patches of one image (or of every row of a batch).

    A single image may be given as ``(H, W, C)``, ``(H, W)`` or flat; a batch
    as ``(n, H*W*C)``. Patches come in row-major grid order with channels last.
    """
    arr = np.asarray(image, dtype=np.float64)
    H, W, C = spec.image_shape
    single = not (arr.ndim == 2 and arr.shape[1] == spec.image_dim)
    if single:
        if arr.size != spec.image_dim:
            raise GeometryError(f"image with {arr.size} values does not match {spec.image_shape}")
        imgs = arr.reshape(1, H, W, C)
    else:
        imgs = arr.reshape(-1, H, W, C)
    h, w = spec.patch_shape
    out = [imgs[:, r:r + h, c:c + w, :].reshape(imgs.shape[0], -1) for r, c in spec.windows()]
    return [p[0] for p in out] if single else out


@dataclass
class MLPClassifier:
    """Two ReLU hidden layers ``[n/2, n/4]`` and a softmax output, on standardized inputs."""
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, feats: np.ndarray) -> np.ndarray:
        h = (np.asarray(feats, dtype=np.float64) - self.mean) / self.scale
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return h

    def predict_proba(self, feats: np.ndarray) -> np.ndarray:
        return softmax(self.logits(feats))


def classifier_dims(n: int, n_classes: int) -> list[int]:
    return [n, max(1, n // 2), max(1, n // 4), n_classes]


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-4


def train_classifier(feats: np.ndarray, y: np.ndarray, n_classes: int, seed, cfg: ClassifierConfig = ClassifierConfig(),
                     val: tuple[np.ndarray, np.ndarray] | None = None) -> MLPClassifier:
    """Cross-entropy training with Adam; keeps the best-validation epoch when ``val`` is given."""
    feats = np.asarray(feats, dtype=np.float64)
    dims = classifier_dims(feats.shape[1], n_classes)
    base = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    weights = [init_weights(dims[i], dims[i + 1], (*base, 11, i)) for i in range(3)]
    biases = [np.zeros(dims[i + 1]) for i in range(3)]
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale = np.where(scale > 1e-8, scale, 1.0)
    clf = MLPClassifier(weights, biases, mean, scale)
    states = [AdamState.zeros_like(t, lr=cfg.lr) for t in weights + biases]
    xs = (feats - mean) / scale
    onehot = np.eye(n_classes)[y]
    best = None
    best_acc = -1.0
    n = feats.shape[0]
    for epoch in range(cfg.epochs):
        perm = make_rng((*base, 12), epoch).permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            acts = [xs[idx]]
            for i in range(3):
                a = acts[-1] @ clf.weights[i] + clf.biases[i]
                acts.append(a if i == 2 else np.maximum(a, 0.0))
            g = (softmax(acts[-1]) - onehot[idx]) / idx.size
            grads_w, grads_b = [None] * 3, [None] * 3
            for i in (2, 1, 0):
                grads_w[i] = acts[i].T @ g + cfg.weight_decay * clf.weights[i]
                grads_b[i] = g.sum(axis=0)
                if i:
                    g = (g @ clf.weights[i].T) * (acts[i] > 0)
            params = clf.weights + clf.biases
            new = []
            for k, (p, gr) in enumerate(zip(params, grads_w + grads_b)):
                p2, states[k] = adam_step(p, gr, states[k])
                new.append(p2)
            clf.weights, clf.biases = new[:3], new[3:]
        if val is not None:
            acc = float(np.mean(np.argmax(clf.logits(val[0]), axis=1) == val[1]))
            if acc > best_acc:
                best_acc = acc
                best = MLPClassifier([w.copy() for w in clf.weights], [b.copy() for b in clf.biases], mean, scale)
    return best if best is not None else clf


@dataclass
class Stream:
    name: str
    patch_index: int | None  # None for the whole-image stream
    model: CosmosModel
    classifier: MLPClassifier | None = None
    weight: float = 1.0
    report: TrainReport | None = None

    def inputs(self, x: np.ndarray, spec: PatchSpec | None) -> np.ndarray:
        if self.patch_index is None:
            return x
        return extract_patches(x, spec)[self.patch_index]

    def posterior(self, x: np.ndarray, spec: PatchSpec | None) -> np.ndarray:
        if self.classifier is None:
            raise UntrainedError(f"stream {self.name} has no classifier")
        return self.classifier.predict_proba(extract_features(self.model, self.inputs(x, spec)))


@dataclass
class StreamEnsemble:
    spec: PatchSpec | None
    streams: list[Stream]
    n_classes: int
    val_acc: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def patch_streams(self) -> list[Stream]:
        return [s for s in self.streams if s.patch_index is not None]

    @property
    def whole_stream(self) -> Stream | None:
        return next((s for s in self.streams if s.patch_index is None), None)

    def only(self, names: Sequence[str]) -> "StreamEnsemble":
        return replace(self, streams=[s for s in self.streams if s.name in names])


def fuse(posteriors: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted mean of per-stream posterior matrices (sum rule)."""
    if not posteriors:
        raise UntrainedError("no streams to fuse")
    w = np.ones(len(posteriors)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("fusion weights must be nonnegative with positive sum")
    stacked = np.stack([np.atleast_2d(p) for p in posteriors])
    return np.tensordot(w / w.sum(), stacked, axes=1)


def predict(ensemble: StreamEnsemble, images) -> tuple[np.ndarray, np.ndarray]:
    """Fused class prediction; returns ``(classes, posteriors)`` for a batch of flat images.

    ``np.argmax`` picks the lowest class index on ties.
    """
    if not ensemble.streams or any(s.classifier is None for s in ensemble.streams):
        raise UntrainedError("ensemble has untrained streams")
    x = np.atleast_2d(np.asarray(images, dtype=np.float64))
    posts = [s.posterior(x, ensemble.spec) for s in ensemble.streams]
    fused = fuse(posts, [s.weight for s in ensemble.streams])
    return np.argmax(fused, axis=1), fused


def accuracy(ensemble: StreamEnsemble, data: DataBatch) -> float:
    classes, _ = predict(ensemble, data.x)
    return float(np.mean(classes == data.y))


@dataclass(frozen=True)
class PipelineConfig:
    patch_dims: tuple[int, ...] = (196, 150, 100, 100, 50)
    whole_dims: tuple[int, ...] | None = (784, 400, 200, 100, 50)
    use_patches: bool = True
    use_skips: bool = True
    classifier: ClassifierConfig = ClassifierConfig()


class StreamError(RuntimeError):
    def __init__(self, stream: str, cause: Exception):
        self.stream = stream
        self.cause = cause
        super().__init__(f"stream {stream}: {cause}")


def _train_stream(name: str, patch_index: int | None, dims, train_data: DataBatch, val_data: DataBatch | None,
                  spec: PatchSpec | None, hyper: Hyperparams, cfg: PipelineConfig, stream_seed: int) -> Stream:
    def view(d: DataBatch | None) -> DataBatch | None:
        if d is None:
            return None
        x = d.x if patch_index is None else extract_patches(d.x, spec)[patch_index]
        return DataBatch(x, d.y, d.class_count)

    tr, va = view(train_data), view(val_data)
    if tr.x.shape[1] != dims[0]:
        raise StreamError(name, ValueError(f"architecture expects {dims[0]} inputs, stream has {tr.x.shape[1]}"))
    h = replace(hyper, seed=stream_seed)
    try:
        model = init_model(list(dims), train_data.class_count, (stream_seed, 7), h.dropout_rate, cfg.use_skips)
        model, report = train(model, tr, va, h)
    except DivergenceError as err:
        raise StreamError(name, err) from err
    f_tr = extract_features(model, tr.x)
    val = None if va is None else (extract_features(model, va.x), va.y)
    clf = train_classifier(f_tr, tr.y, train_data.class_count, (stream_seed, 8), cfg.classifier, val)
    log.info("stream %s trained: %d epochs (%s)", name, len(report.history), report.stop_reason)
    return Stream(name, patch_index, model, clf, 1.0, report)


def train_pipeline(train_data: DataBatch, val_data: DataBatch | None, spec: PatchSpec | None,
                   hyper: Hyperparams, cfg: PipelineConfig = PipelineConfig(), jobs: int = 1) -> StreamEnsemble:
    """Train nine patch streams (when enabled) plus the whole-image stream and their classifiers.

    Streams share no state and carry their own seeds, so ``jobs > 1`` trains
    them in worker processes with identical results.
    """
    tasks = []
    if cfg.use_patches:
        if spec is None:
            raise GeometryError("patch streams need a PatchSpec")
        tasks += [(f"patch{k}", k, cfg.patch_dims, hyper.seed * 1000 + k) for k in range(9)]
    if cfg.whole_dims is not None:
        tasks.append(("whole", None, cfg.whole_dims, hyper.seed * 1000 + 9))
    if not tasks:
        raise ValueError("pipeline has no streams")
    args = [(name, k, dims, train_data, val_data, spec, hyper, cfg, seed) for name, k, dims, seed in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as pool:
            streams = list(pool.map(_train_stream, *zip(*args)))
    else:
        streams = [_train_stream(*a) for a in args]
    ens = StreamEnsemble(spec, streams, train_data.class_count)
    if val_data is not None and val_data.n:
        ens.val_acc = accuracy(ens, val_data)
    return ens


@dataclass
class ScoreHistogram:
    edges: np.ndarray
    counts: np.ndarray  # bins x classes
    class_of_interest: int

    def to_csv(self) -> str:
        header = ["bin_low", "bin_high"] + [f"count_class{k}" for k in range(self.counts.shape[1])]
        lines = [",".join(header)]
        for b in range(self.counts.shape[0]):
            row = [repr(float(self.edges[b])), repr(float(self.edges[b + 1]))]
            row += [str(int(c)) for c in self.counts[b]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def overlap(self) -> int:
        """Number of bins holding mass from more than one true class."""
        return int(np.sum((self.counts > 0).sum(axis=1) > 1))


def score_histogram(scores: np.ndarray, labels: np.ndarray, n_classes: int, class_of_interest: int,
                    bins: int = 50) -> ScoreHistogram:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty dataset")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, scores, side="right") - 1, 0, bins - 1)
    counts = np.zeros((bins, n_classes), dtype=np.int64)
    np.add.at(counts, (idx, np.asarray(labels)), 1)
    return ScoreHistogram(edges, counts, class_of_interest)


def score_distributions(ensemble: StreamEnsemble, data: DataBatch, class_of_interest: int,
                        bins: int = 50) -> ScoreHistogram:
    """Histogram of fused posteriors for ``class_of_interest``, split by true class."""
    if data.n == 0:
        raise ValueError("empty dataset")
    _, post = predict(ensemble, data.x)
    return score_histogram(post[:, class_of_interest], data.y, ensemble.n_classes, class_of_interest, bins)
