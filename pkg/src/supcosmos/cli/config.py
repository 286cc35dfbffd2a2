"""INI run configuration with command-line overrides."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from ..pipeline import ClassifierConfig, PatchSpec, PipelineConfig
from ..training import Hyperparams


class ConfigError(ValueError):
    pass


ABLATION_CELLS = (
    "euclidean", "cosine", "mahalanobis",
    "euclidean+mi", "cosine+mi", "mahalanobis+mi",
    "euclidean+cosine", "euclidean+mahalanobis", "cosine+mahalanobis",
)


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "mnist"  # mnist | cifar10 | idx | synthetic
    root: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    n_train: int | None = None
    n_test: int | None = None
    val_fraction: float = 0.1
    seed: int = 0
    kind: str = "gaussian"  # synthetic only: gaussian | images
    n_per_class: int = 50
    dim: int = 6
    classes: int = 2
    separation: float = 4.0
    noise: float = 0.05
    image_shape: tuple[int, ...] = (28, 28, 1)


@dataclass(frozen=True)
class AblationConfig:
    cells: tuple[str, ...] = ABLATION_CELLS
    depths: tuple[int, ...] = ()
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    patch_shape: tuple[int, int] | None = (14, 14)
    pipeline: PipelineConfig = PipelineConfig()
    hyper: Hyperparams = Hyperparams()
    mi: bool = True
    ablate: AblationConfig = AblationConfig()
    out: str = "run"
    jobs: int = 1

    def __post_init__(self):
        h = self.hyper
        if not (h.euclidean or h.mahalanobis or h.cosine_mode != "off"):
            raise ConfigError("at least one reconstruction loss must be enabled")
        if self.jobs < 1:
            raise ConfigError("jobs must be positive")
        if self.pipeline.use_patches and self.patch_shape is None:
            raise ConfigError("use_patches needs model.patch_shape")
        if not self.pipeline.use_patches and self.pipeline.whole_dims is None:
            raise ConfigError("no streams: enable patches or set model.whole_dims")

    @property
    def seed(self) -> int:
        return self.hyper.seed

    def effective_hyper(self) -> Hyperparams:
        return self.hyper if self.mi else replace(self.hyper, lambda1=0.0)

    def patch_spec(self, image_shape) -> PatchSpec | None:
        if self.patch_shape is None or image_shape is None:
            return None
        return PatchSpec(tuple(image_shape), tuple(self.patch_shape))

    def check_dims(self, input_dim: int, spec: PatchSpec | None) -> None:
        """Architecture input widths must match the streams they will read."""
        p = self.pipeline
        if p.use_patches:
            if spec is None:
                raise ConfigError("patch streams need image-shaped data")
            if p.patch_dims[0] != spec.patch_dim:
                raise ConfigError(f"patch_dims starts at {p.patch_dims[0]} but patches have {spec.patch_dim} values")
        if p.whole_dims is not None and p.whole_dims[0] != input_dim:
            raise ConfigError(f"whole_dims starts at {p.whole_dims[0]} but samples have {input_dim} values")

    def snapshot(self) -> dict:
        """Everything that determines the trained model; output location and worker count excluded."""
        d = asdict(self)
        d.pop("out")
        d.pop("jobs")
        return d

    @classmethod
    def from_snapshot(cls, d: dict) -> "RunConfig":
        pipe = dict(d["pipeline"])
        pipe["classifier"] = ClassifierConfig(**pipe["classifier"])
        return cls(data=DataConfig(**_tuples(d["data"])),
                   patch_shape=_tuple(d["patch_shape"]),
                   pipeline=PipelineConfig(**_tuples(pipe)),
                   hyper=Hyperparams(**d["hyper"]),
                   mi=d["mi"],
                   ablate=AblationConfig(**_tuples(d["ablate"])))


def _tuple(v):
    return None if v is None else tuple(v)


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())


def _optional(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


def _bool(text: str) -> bool:
    states = configparser.ConfigParser.BOOLEAN_STATES
    if text.strip().lower() not in states:
        raise ValueError(f"not a boolean: {text!r}")
    return states[text.strip().lower()]


# section -> key -> (target, field, converter)
_DATA = {f.name: ("data", f.name) for f in fields(DataConfig)}
_SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {k: (*v, None) for k, v in _DATA.items()},
    "model": {
        "patch_shape": ("run", "patch_shape", _optional(_ints)),
        "patch_dims": ("pipeline", "patch_dims", _ints),
        "whole_dims": ("pipeline", "whole_dims", _optional(_ints)),
        "use_patches": ("pipeline", "use_patches", _bool),
        "use_skips": ("pipeline", "use_skips", _bool),
        "dropout_rate": ("hyper", "dropout_rate", float),
    },
    "loss": {
        "euclidean": ("hyper", "euclidean", _bool),
        "cosine": ("hyper", "cosine_mode", str),
        "mahalanobis": ("hyper", "mahalanobis", _bool),
        "mi": ("run", "mi", _bool),
    },
    "train": {k: ("hyper", k, None) for k in (
        "lambda1", "lambda2", "lr_w", "lr_m", "lr_omega", "max_iters", "batch_size", "convergence_tol",
        "patience", "lambda_decay", "metric_cap", "freeze_metric")},
    "classifier": {f.name: ("classifier", f.name, None) for f in fields(ClassifierConfig)},
    "run": {
        "seed": ("hyper", "seed", int),
        "out": ("run", "out", str),
        "jobs": ("run", "jobs", int),
    },
    "ablate": {
        "cells": ("ablate", "cells", lambda t: tuple(c.strip().lower() for c in t.split(",") if c.strip())),
        "depths": ("ablate", "depths", _ints),
        "seeds": ("ablate", "seeds", _ints),
    },
}


def _default_converter(default: Any, annotation: str):
    if isinstance(default, bool) or annotation == "bool":
        return _bool
    if "tuple" in annotation:
        return _ints
    if isinstance(default, int) or annotation.startswith("int"):
        return _optional(int) if "None" in annotation else int
    if isinstance(default, float) or annotation == "float":
        return float
    return _optional(str) if "None" in annotation else str


def _field_types(cls) -> dict[str, tuple[Any, str]]:
    return {f.name: (f.default, str(f.type)) for f in fields(cls)}


_TYPES = {"data": _field_types(DataConfig), "hyper": _field_types(Hyperparams),
          "classifier": _field_types(ClassifierConfig)}


def _assign(values: dict, section: str, key: str, text: str) -> None:
    spec = _SCHEMA.get(section)
    if spec is None:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in spec:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    target, name, conv = spec[key]
    if conv is None:
        conv = _default_converter(*_TYPES[target][name])
    try:
        values[target][name] = conv(text)
    except ValueError as err:
        raise ConfigError(f"[{section}] {key} = {text!r}: {err}") from None


def _values_from(base: RunConfig | None) -> dict[str, dict]:
    if base is None:
        return {"data": {}, "pipeline": {}, "hyper": {}, "classifier": {}, "run": {}, "ablate": {}}
    pipe = {f.name: getattr(base.pipeline, f.name) for f in fields(PipelineConfig) if f.name != "classifier"}
    return {"data": asdict(base.data), "pipeline": pipe, "hyper": asdict(base.hyper),
            "classifier": asdict(base.pipeline.classifier), "ablate": asdict(base.ablate),
            "run": {"patch_shape": base.patch_shape, "mi": base.mi, "out": base.out, "jobs": base.jobs}}


def load_config(path=None, overrides: Iterable[str] = (), base: RunConfig | None = None) -> RunConfig:
    """Read an INI file (optional) then apply ``section.key=value`` overrides, on top of ``base`` if given."""
    values = _values_from(base)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as f:
                parser.read_file(f)
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        except configparser.Error as err:
            raise ConfigError(f"malformed config {path}: {err}") from None
        for section in parser.sections():
            for key, text in parser.items(section):
                _assign(values, section, key, text)
    for item in overrides:
        lhs, sep, text = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        _assign(values, section.strip(), key.strip(), text.strip())
    try:
        classifier = ClassifierConfig(**values["classifier"])
        return RunConfig(data=DataConfig(**values["data"]),
                         pipeline=PipelineConfig(classifier=classifier, **values["pipeline"]),
                         hyper=Hyperparams(**values["hyper"]),
                         ablate=AblationConfig(**values["ablate"]),
                         **values["run"])
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def write_example(path) -> None:
    """Write a small runnable config on synthetic data."""
    Path(path).write_text(EXAMPLE)


EXAMPLE = """\
[data]
dataset = synthetic
kind = gaussian
dim = 6
classes = 2
n_per_class = 50
separation = 4

[model]
use_patches = false
whole_dims = 6,4

[loss]
cosine = standard
mahalanobis = true
mi = true

[train]
max_iters = 5
batch_size = 16

[run]
seed = 0
"""
