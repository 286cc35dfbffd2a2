"""Dataset containers, MNIST IDX / CIFAR-10 binary readers, splits and toy data."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numeric import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class RecordAlignmentError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


@dataclass
class DataBatch:
    """Samples as rows of ``x`` (values in [0, 1]) with integer labels ``y``."""
    x: np.ndarray
    y: np.ndarray
    class_count: int
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError(f"x must be 2-D, got shape {self.x.shape}")
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.shape != (self.x.shape[0],):
            raise ValueError(f"{self.x.shape[0]} samples but {self.y.shape} labels")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("x contains non-finite values")
        if self.x.size and (self.x.min() < 0.0 or self.x.max() > 1.0):
            raise ValueError("x values must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "DataBatch":
        return DataBatch(self.x[idx], self.y[idx], self.class_count, self.image_shape)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX blob into an array of its declared shape."""
    if len(raw) < 4:
        raise TruncatedFileError("file shorter than the IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError("file shorter than the IDX header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(shape))
    if len(raw) - header < count:
        raise TruncatedFileError(f"expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(shape)


def serialize_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def load_idx(images_path, labels_path) -> DataBatch:
    """Load an IDX image/label file pair (optionally gzipped); pixels scaled by 1/255."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, rows, cols = images.shape
    class_count = max(10, int(labels.max()) + 1) if labels.size else 10
    return DataBatch(images.reshape(n, rows * cols) / 255.0, labels.astype(np.int64), class_count, (rows, cols, 1))


def to_bytes(x: np.ndarray) -> np.ndarray:
    """Invert the 1/255 scaling (exact for values produced by the loaders)."""
    return np.rint(np.asarray(x) * 255.0).astype(np.uint8)


def save_idx(batch: DataBatch, images_path, labels_path) -> None:
    h, w = batch.image_shape[:2]
    Path(images_path).write_bytes(serialize_idx(to_bytes(batch.x).reshape(batch.n, h, w)))
    Path(labels_path).write_bytes(serialize_idx(batch.y.astype(np.uint8)))


def parse_cifar10(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(pixels, labels)``; pixels are ``n x 32 x 32 x 3`` uint8."""
    if len(raw) % CIFAR_RECORD:
        raise RecordAlignmentError(f"{len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise LabelRangeError(f"label {labels.max()} outside 0..9")
    planar = records[:, 1:].reshape(-1, 3, 32, 32)
    return planar.transpose(0, 2, 3, 1), labels


def serialize_cifar10(pixels: np.ndarray, labels: np.ndarray) -> bytes:
    planar = np.asarray(pixels, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(labels), -1)
    return np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planar], axis=1).tobytes()


def load_cifar10(batch_paths: Sequence) -> DataBatch:
    """Concatenate CIFAR-10 binary batches into one channel-interleaved batch."""
    xs, ys = [], []
    for path in batch_paths:
        pixels, labels = parse_cifar10(_read_bytes(path))
        xs.append(pixels.reshape(len(labels), -1))
        ys.append(labels)
    x = np.concatenate(xs) if xs else np.zeros((0, 3072), dtype=np.uint8)
    y = np.concatenate(ys) if ys else np.zeros(0, dtype=np.int64)
    return DataBatch(x / 255.0, y, 10, (32, 32, 3))


def split(batch: DataBatch, fractions: Sequence[float], seed: int) -> tuple[DataBatch, ...]:
    """Stratified, seeded split into ``len(fractions)`` parts.

    Each class is shuffled and cut by largest-remainder rounding of
    ``fraction * class_size``; samples left over when the fractions sum to
    less than one are dropped.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or min(fractions) <= 0 or sum(fractions) > 1 + 1e-12:
        raise ValueError("fractions must be positive and sum to at most 1")
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    for cls in range(batch.class_count):
        members = np.flatnonzero(batch.y == cls)
        if members.size == 0:
            continue
        if members.size < len(fractions):
            raise ValueError(f"class {cls} has {members.size} samples, fewer than {len(fractions)} parts")
        members = members[make_rng(seed, 303, cls).permutation(members.size)]
        exact = np.array(fractions) * members.size
        counts = np.floor(exact + 1e-9).astype(int)
        budget = int(np.floor(sum(fractions) * members.size + 1e-9))
        for k in np.argsort(-(exact - counts), kind="stable")[: max(0, budget - counts.sum())]:
            counts[k] += 1
        start = 0
        for k, c in enumerate(counts):
            parts[k].append(members[start:start + c])
            start += c
    out = []
    for k, chunks in enumerate(parts):
        idx = np.concatenate(chunks) if chunks else np.zeros(0, dtype=int)
        idx = idx[make_rng(seed, 304, k).permutation(idx.size)]
        out.append(batch.subset(idx))
    return tuple(out)


def stratified_subset(batch: DataBatch, n: int, seed: int) -> DataBatch:
    """First ``n`` samples of a class-balanced seeded shuffle."""
    if n >= batch.n:
        return batch
    (part,) = split(batch, [n / batch.n], seed)
    return part


def synth_gaussian_classes(n_per_class: int, dim: int, class_count: int, separation: float,
                           seed: int, noise: float = 0.05) -> DataBatch:
    """Isotropic Gaussian blobs around 0.5 whose means are ``separation * noise`` apart.

    Means use orthonormal directions when ``class_count <= dim`` so every pair
    of classes is equally far apart; values are clipped to [0, 1].
    """
    if min(n_per_class, dim, class_count) < 1 or separation < 0:
        raise ValueError("n_per_class, dim, class_count must be positive and separation >= 0")
    rng = make_rng(seed, 404)
    if class_count <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        directions = q[:, :class_count].T
    else:
        directions = rng.standard_normal((class_count, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = 0.5 + separation * noise * directions / np.sqrt(2.0)
    y = np.repeat(np.arange(class_count), n_per_class)
    x = means[y] + noise * rng.standard_normal((y.size, dim))
    return DataBatch(np.clip(x, 0.0, 1.0), y, class_count)


def synth_images(n_per_class: int, image_shape: tuple[int, int, int], class_count: int, seed: int,
                 noise: float = 0.1) -> DataBatch:
    """Blurry class-specific prototype images plus noise; a stand-in for image datasets in tests."""
    h, w, c = image_shape
    rng = make_rng(seed, 505)
    protos = rng.random((class_count, h, w, c))
    for _ in range(2):
        protos = (protos + np.roll(protos, 1, axis=1) + np.roll(protos, 1, axis=2)) / 3.0
    protos = (protos - protos.min()) / (protos.max() - protos.min())
    y = np.repeat(np.arange(class_count), n_per_class)
    x = protos[y] + noise * rng.standard_normal((y.size, h, w, c))
    return DataBatch(np.clip(x, 0.0, 1.0).reshape(y.size, -1), y, class_count, image_shape)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(root=None, part: str = "train") -> tuple[Path, Path] | None:
    """Locate an MNIST file pair under ``root`` (default ``$COSMOS_DATA_DIR``), gz or raw."""
    root = root or os.environ.get("COSMOS_DATA_DIR")
    if not root:
        return None
    found = []
    for stem in MNIST_FILES[part]:
        for base in (Path(root), Path(root) / "mnist", Path(root) / "MNIST" / "raw"):
            dotted = stem.replace("-idx", ".idx")
            hits = [p for name in (stem, dotted) for p in (base / name, base / f"{name}.gz") if p.exists()]
            if hits:
                found.append(hits[0])
                break
    return (found[0], found[1]) if len(found) == 2 else None
