"""Resolve a ``DataConfig`` into train / validation / test batches."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from ..data import (DataBatch, DataFormatError, find_mnist, load_cifar10, load_idx, split, stratified_subset,
                    synth_gaussian_classes, synth_images)
from .config import ConfigError, DataConfig

TEST_FRACTION = 0.2


class DataError(RuntimeError):
    pass


@dataclass
class Splits:
    train: DataBatch
    val: DataBatch | None
    test: DataBatch

    @property
    def image_shape(self):
        return self.train.image_shape

    def part(self, name: str) -> DataBatch:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        batch = getattr(self, name)
        if batch is None:
            raise DataError(f"no {name} split configured")
        return batch


def data_root(dc: DataConfig) -> Path | None:
    root = dc.root or os.environ.get("COSMOS_DATA_DIR")
    return Path(root) if root else None


def _train_val(pool: DataBatch, dc: DataConfig) -> tuple[DataBatch, DataBatch | None]:
    """Stratified training subset plus a disjoint validation subset drawn from the same pool."""
    n_train = pool.n if dc.n_train is None else min(dc.n_train, pool.n)
    n_val = int(round(dc.val_fraction * n_train))
    if n_val == 0:
        return stratified_subset(pool, n_train, dc.seed), None
    if n_train + n_val > pool.n:
        n_train = int(pool.n / (1 + dc.val_fraction))
        n_val = pool.n - n_train
    train, val = split(pool, (n_train / pool.n, n_val / pool.n), dc.seed)
    return train, val


def _finish(train_pool: DataBatch, test: DataBatch, dc: DataConfig) -> Splits:
    train, val = _train_val(train_pool, dc)
    if dc.n_test is not None:
        test = stratified_subset(test, dc.n_test, dc.seed + 1)
    return Splits(train, val, test)


def _need(root: Path | None, what: str) -> Path:
    if root is None:
        raise DataError(f"{what}: no data root; set data.root or COSMOS_DATA_DIR")
    return root


def load_dataset(dc: DataConfig) -> Splits:
    try:
        if dc.dataset == "synthetic":
            return _synthetic(dc)
        if dc.dataset == "mnist":
            root = _need(data_root(dc), "mnist")
            tr, te = find_mnist(root, "train"), find_mnist(root, "test")
            if tr is None or te is None:
                raise DataError(f"mnist IDX files not found under {root}")
            return _finish(load_idx(*tr), load_idx(*te), dc)
        if dc.dataset == "idx":
            paths = (dc.train_images, dc.train_labels, dc.test_images, dc.test_labels)
            if any(p is None for p in paths):
                raise ConfigError("idx dataset needs train_images, train_labels, test_images, test_labels")
            root = data_root(dc) or Path(".")
            paths = [root / p for p in paths]
            for p in paths:
                if not p.exists():
                    raise DataError(f"missing data file {p}")
            return _finish(load_idx(paths[0], paths[1]), load_idx(paths[2], paths[3]), dc)
        if dc.dataset == "cifar10":
            root = _need(data_root(dc), "cifar10")
            base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").is_dir() else root
            train_files = [base / f"data_batch_{k}.bin" for k in range(1, 6)]
            files = train_files + [base / "test_batch.bin"]
            missing = [str(p) for p in files if not p.exists()]
            if missing:
                raise DataError(f"missing CIFAR-10 files: {', '.join(missing)}")
            return _finish(load_cifar10(train_files), load_cifar10([base / "test_batch.bin"]), dc)
        raise ConfigError(f"unknown dataset {dc.dataset!r}")
    except DataFormatError as err:
        raise DataError(f"bad data file: {err}") from None
    except OSError as err:
        raise DataError(str(err)) from None


def _synthetic(dc: DataConfig) -> Splits:
    if dc.kind == "gaussian":
        data = synth_gaussian_classes(dc.n_per_class, dc.dim, dc.classes, dc.separation, dc.seed, dc.noise)
    elif dc.kind == "images":
        if len(dc.image_shape) != 3:
            raise ConfigError("data.image_shape must be HxWxC")
        data = synth_images(dc.n_per_class, tuple(dc.image_shape), dc.classes, dc.seed, dc.noise)
    else:
        raise ConfigError(f"unknown synthetic kind {dc.kind!r}")
    if dc.val_fraction > 0:
        train, val, test = split(data, (1 - TEST_FRACTION - dc.val_fraction, dc.val_fraction, TEST_FRACTION), dc.seed)
    else:
        (train, test), val = split(data, (1 - TEST_FRACTION, TEST_FRACTION), dc.seed), None
    return Splits(train, val, test)
