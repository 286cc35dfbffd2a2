"""``supcosmos`` command line: train, eval, ablate, extract-features, score-dist."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..model import extract_features
from ..pipeline import StreamEnsemble, StreamError, predict, score_distributions, train_pipeline
from ..training import DivergenceError
from . import ablation
from .archive import ArchiveError, load_model, save_model
from .config import ConfigError, RunConfig, load_config
from .datasets import DataError, Splits, load_dataset
from .metrics import evaluate_predictions

log = logging.getLogger("supcosmos")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
ARCHIVE_NAME = "model.cosmos"
LOG_NAME = "train_log.txt"


def _overrides(args) -> list[str]:
    out = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        out.append(f"run.seed={args.seed}")
    if getattr(args, "jobs", None) is not None:
        out.append(f"run.jobs={args.jobs}")
    if getattr(args, "out", None) is not None:
        out.append(f"run.out={args.out}")
    return out


def _prepare(cfg: RunConfig) -> tuple[Splits, object]:
    data = load_dataset(cfg.data)
    spec = cfg.patch_spec(data.image_shape) if cfg.pipeline.use_patches else None
    cfg.check_dims(data.train.x.shape[1], spec)
    return data, spec


def _input_dim(ens: StreamEnsemble) -> int:
    if ens.spec is not None:
        return ens.spec.image_dim
    return ens.whole_stream.model.dims[0]


def _archive_data(args) -> tuple[StreamEnsemble, RunConfig, np.ndarray, np.ndarray]:
    ens, snapshot = load_model(args.archive)
    cfg = RunConfig.from_snapshot(snapshot)
    if args.config is not None:
        cfg = load_config(args.config, args.set or ())
    elif args.set:
        cfg = load_config(None, args.set, base=cfg)
    batch = load_dataset(cfg.data).part(args.split)
    if batch.x.shape[1] != _input_dim(ens):
        raise DataError(f"archive expects {_input_dim(ens)}-dim samples, {args.split} data has {batch.x.shape[1]}")
    return ens, cfg, batch.x, batch.y


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    data, spec = _prepare(cfg)
    ens = train_pipeline(data.train, data.val, spec, cfg.effective_hyper(), cfg.pipeline, jobs=cfg.jobs)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(ens, out / ARCHIVE_NAME, cfg.snapshot())
    with open(out / LOG_NAME, "w") as f:
        for s in ens.streams:
            for rec in s.report.history:
                f.write(f"stream={s.name} {rec.log_line(timing=False)}\n")
    _, post = predict(ens, data.test.x)
    report = evaluate_predictions(post, data.test.y, ens.n_classes)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.txt").write_text(report.to_text())
    val = "n/a" if np.isnan(ens.val_acc) else f"{100 * ens.val_acc:.2f}%"
    print(f"trained {len(ens.streams)} stream(s); validation accuracy {val}; archive {out / ARCHIVE_NAME}")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    ens, _, x, y = _archive_data(args)
    _, post = predict(ens, x)
    ranks = sorted({int(k) for k in args.rank.split(",")}) if args.rank else ()
    report = evaluate_predictions(post, y, ens.n_classes, ranks)
    print(report.to_text(), end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.csv").write_text(report.to_csv())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    data, _ = _prepare(cfg)
    rows = ablation.run_ablation(cfg, data, cfg.jobs)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(ablation.to_csv(rows))
    (out / "ablation.txt").write_text(ablation.to_text(rows))
    print(ablation.to_text(rows), end="")
    if all(r.failed for r in rows):
        print("error: every ablation cell failed", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_extract(args) -> int:
    ens, _, x, y = _archive_data(args)
    feats = {s.name: extract_features(s.model, s.inputs(x, ens.spec)) for s in ens.streams}
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "features.npz", labels=y, **feats)
    print(f"wrote {len(feats)} feature matrices for {len(y)} samples to {out / 'features.npz'}")
    return EXIT_OK


def cmd_score_dist(args) -> int:
    ens, _, x, y = _archive_data(args)
    if not 0 <= args.cls < ens.n_classes:
        raise ConfigError(f"class {args.cls} outside 0..{ens.n_classes - 1}")
    from ..data import DataBatch
    hist = score_distributions(ens, DataBatch(x, y, ens.n_classes), args.cls, args.bins)
    text = hist.to_csv()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"scores_class{args.cls}.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supcosmos", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, seeded=True):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--out", help="output directory")
        if seeded:
            p.add_argument("--seed", type=int)
            p.add_argument("--jobs", type=int, help="parallel worker processes")

    for name, fn in (("train", cmd_train), ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(func=fn)

    for name, fn in (("eval", cmd_eval), ("extract-features", cmd_extract), ("score-dist", cmd_score_dist)):
        p = sub.add_parser(name)
        p.add_argument("archive")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        common(p, seeded=False)
        if name == "eval":
            p.add_argument("--rank", help="comma-separated k values for rank-k accuracy")
        if name == "score-dist":
            p.add_argument("--class", dest="cls", type=int, default=0, help="class of interest")
            p.add_argument("--bins", type=int, default=50)
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ArchiveError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, StreamError) as err:
        cause = getattr(err, "cause", err)
        if isinstance(cause, DivergenceError):
            print(f"divergence: {err}", file=sys.stderr)
            return EXIT_DIVERGED
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
