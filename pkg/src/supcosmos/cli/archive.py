"""Checksummed binary archive of named float64 tensors plus a JSON metadata block.

Layout (all integers little-endian)::

    magic      8 bytes   b"SCOSMOS\\0"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    count      u32
    count x    name_len u16, name, ndim u8, ndim x u64 shape, prod(shape) x f64
    sha256     32 bytes over everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..model import CosmosModel, skip_pairs
from ..pipeline import MLPClassifier, PatchSpec, Stream, StreamEnsemble

MAGIC = b"SCOSMOS\0"
VERSION = 1
_DIGEST = 32


class ArchiveError(ValueError):
    pass


class ChecksumError(ArchiveError):
    pass


class VersionError(ArchiveError):
    pass


@dataclass
class ModelArchive:
    meta: dict
    tensors: dict[str, np.ndarray]
    version: int = VERSION

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True, allow_nan=False).encode()
        parts = [MAGIC, struct.pack("<II", self.version, len(meta)), meta, struct.pack("<I", len(self.tensors))]
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name], dtype="<f8", order="C")
            encoded = name.encode()
            parts.append(struct.pack(f"<HB{arr.ndim}Q", len(encoded), arr.ndim, *arr.shape))
            parts.append(encoded)
            parts.append(arr.tobytes())
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelArchive":
        if len(raw) < len(MAGIC) + 12 + _DIGEST:
            raise ArchiveError("archive too short")
        body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("archive checksum mismatch")
        if body[:8] != MAGIC:
            raise ArchiveError("not a model archive")
        version, meta_len = struct.unpack_from("<II", body, 8)
        if version != VERSION:
            raise VersionError(f"archive version {version} unsupported (expected {VERSION})")
        pos = 16
        meta = json.loads(body[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", body, pos)
            pos += 3
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            name = body[pos:pos + name_len].decode()
            pos += name_len
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        if pos != len(body):
            raise ArchiveError("trailing bytes after tensors")
        return cls(meta, tensors, version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelArchive":
        return cls.from_bytes(Path(path).read_bytes())


def _model_tensors(model: CosmosModel, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in model.named_tensors().items()}


def _clf_tensors(clf: MLPClassifier, prefix: str) -> dict[str, np.ndarray]:
    out = {f"{prefix}/clf/mean": clf.mean, f"{prefix}/clf/scale": clf.scale}
    for i, (w, b) in enumerate(zip(clf.weights, clf.biases)):
        out[f"{prefix}/clf/W{i}"] = w
        out[f"{prefix}/clf/b{i}"] = b
    return out


def _finite(x: float) -> float | None:
    return float(x) if np.isfinite(x) else None


def ensemble_to_archive(ens: StreamEnsemble, config: dict) -> ModelArchive:
    tensors: dict[str, np.ndarray] = {}
    streams = []
    for s in ens.streams:
        tensors.update(_model_tensors(s.model, s.name))
        tensors.update(_clf_tensors(s.classifier, s.name))
        info = {"name": s.name, "patch_index": s.patch_index, "weight": s.weight, "dims": s.model.dims,
                "dropout_rate": s.model.dropout_rate, "use_skips": s.model.use_skips,
                "n_clf_layers": len(s.classifier.weights)}
        if s.report is not None:
            info["report"] = {"stop_reason": s.report.stop_reason, "best_epoch": s.report.best_epoch,
                              "best_val_acc": _finite(s.report.best_val_acc), "epochs": len(s.report.history)}
        streams.append(info)
    spec = None if ens.spec is None else {"image_shape": list(ens.spec.image_shape),
                                          "patch_shape": list(ens.spec.patch_shape)}
    val_acc = _finite(ens.val_acc)
    meta = {"config": config, "streams": streams, "n_classes": ens.n_classes, "spec": spec, "val_acc": val_acc,
            "extra": ens.meta}
    return ModelArchive(meta, tensors)


def archive_to_ensemble(arc: ModelArchive) -> StreamEnsemble:
    t = arc.tensors
    try:
        streams = []
        for info in arc.meta["streams"]:
            p, dims = info["name"], [int(d) for d in info["dims"]]
            L = len(dims) - 1
            skips = {i: t.get(f"{p}/skip{i}") for i in skip_pairs(dims)}
            model = CosmosModel(dims, [t[f"{p}/W{i}"] for i in range(L)], [t[f"{p}/b{i}"] for i in range(L)],
                                [t[f"{p}/c{i}"] for i in range(L)], skips, t[f"{p}/M"], t[f"{p}/omega"],
                                info["dropout_rate"], info["use_skips"])
            k = info["n_clf_layers"]
            clf = MLPClassifier([t[f"{p}/clf/W{i}"] for i in range(k)], [t[f"{p}/clf/b{i}"] for i in range(k)],
                                t[f"{p}/clf/mean"], t[f"{p}/clf/scale"])
            streams.append(Stream(p, info["patch_index"], model, clf, info["weight"]))
        spec = arc.meta["spec"]
        spec = None if spec is None else PatchSpec(tuple(spec["image_shape"]), tuple(spec["patch_shape"]))
        val_acc = arc.meta["val_acc"]
        return StreamEnsemble(spec, streams, arc.meta["n_classes"], float("nan") if val_acc is None else val_acc,
                              arc.meta.get("extra", {}))
    except KeyError as err:
        raise ArchiveError(f"archive is missing {err}") from None


def save_model(ens: StreamEnsemble, path, config: dict) -> ModelArchive:
    arc = ensemble_to_archive(ens, config)
    arc.save(path)
    return arc


def load_model(path) -> tuple[StreamEnsemble, dict]:
    arc = ModelArchive.load(path)
    return archive_to_ensemble(arc), arc.meta["config"]
