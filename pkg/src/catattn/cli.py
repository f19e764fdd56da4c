"""Command-line entry point: ``catattn {train,eval,export-attn,ablate}``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .backbone import init_model
from .config import RunConfig, load_config
from .data import load_cifar_bin
from .export import export_attention
from .training import (
    ABLATION_COLUMNS,
    FACTOR_COLUMNS,
    METRIC_COLUMNS,
    evaluate,
    prepare_data,
    run_ablation,
    train,
    verification_mode,
)

log = logging.getLogger("catattn")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def metrics_line(acc: float, loss: float, n: int) -> str:
    return f"accuracy={acc:.6f} loss={loss:.6f} n={n}"


def _export_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.export_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg: RunConfig, args) -> int:
    out = _export_dir(cfg)
    result = train(cfg, on_epoch=lambda r: log.info("epoch %(epoch)d val_acc=%(val_acc).4f", r))
    checkpoint.save(out / "model.ckpt", result.store)
    write_csv(out / "factors.csv", FACTOR_COLUMNS, result.factors)
    write_csv(out / "metrics.csv", METRIC_COLUMNS, result.metrics)
    print(metrics_line(result.accuracy, result.loss, result.n_eval))
    return 0


def _load_model(cfg: RunConfig, ckpt_path: Path, num_classes: int):
    dtype = np.float64 if cfg.verify else np.float32
    spec = cfg.model_spec(num_classes)
    store = init_model(spec, seed=cfg.seed, dtype=dtype)
    checkpoint.restore(store, checkpoint.load(ckpt_path))
    return spec, store, dtype


def _checkpoint_path(cfg: RunConfig, given: str | None) -> Path:
    return Path(given) if given else Path(cfg.export_dir) / "model.ckpt"


def cmd_eval(cfg: RunConfig, args) -> int:
    with verification_mode(cfg.verify):
        train_ds, val_ds = prepare_data(cfg)
        ds = {"train": train_ds, "val": val_ds}[args.split]
        spec, store, dtype = _load_model(cfg, _checkpoint_path(cfg, args.checkpoint), cfg.num_classes or train_ds.num_classes)
        x = ds.standardized(cfg.norm_mean, cfg.norm_std, dtype)
        acc, loss, n = evaluate(store, spec, x, ds.labels)
    print(metrics_line(acc, loss, n))
    return 0


def cmd_export_attn(cfg: RunConfig, args) -> int:
    with verification_mode(cfg.verify):
        if args.images:
            ds = load_cifar_bin(args.images, cfg.label_bytes, cfg.label_index, cfg.num_classes or None)
            num_classes = cfg.num_classes or ds.num_classes
        else:
            train_ds, ds = prepare_data(cfg)
            num_classes = cfg.num_classes or train_ds.num_classes
        if len(ds) == 0:
            raise ValueError("no images to export")
        indices = [int(i) for i in args.index.split(",")] if args.index else list(range(min(args.count, len(ds))))
        bad = [i for i in indices if not 0 <= i < len(ds)]
        if bad:
            raise ValueError(f"image index out of range: {bad} (source has {len(ds)} images)")
        spec, store, dtype = _load_model(cfg, _checkpoint_path(cfg, args.checkpoint), num_classes)
        x = ds.standardized(cfg.norm_mean, cfg.norm_std, dtype)[indices]
        layers = [l for l in (args.layer or "").split(",") if l]
        out = Path(args.out) if args.out else Path(cfg.export_dir) / "attention"
        written = export_attention(store, spec, x, out, layers, [f"img{i}" for i in indices])
    print(f"wrote {len(written)} files to {out}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _export_dir(cfg)
    rows = run_ablation(cfg, on_row=lambda r: log.info("%s: accuracy=%s", r.label, r.accuracy))
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for row in rows:
            w.writerow(row.csv_fields())
    for row in rows:
        acc = "failed" if math.isnan(row.accuracy) else f"{row.accuracy:.4f}"
        print(f"{row.label:<45} params={row.params:<8d} accuracy={acc}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export-attn": cmd_export_attn, "ablate": cmd_ablate}


def _add_common(p: argparse.ArgumentParser, suppress: bool) -> None:
    # subcommand copies use SUPPRESS so flags given before the subcommand survive
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="key=value run configuration file")
    p.add_argument(
        "--override", action="append", default=d([]), metavar="KEY=VALUE", help="override one config key (repeatable)"
    )
    p.add_argument("--seed", type=int, default=d(None), help="seed for data, init and shuffling")
    p.add_argument("--verify", action="store_true", default=d(False), help="64-bit arithmetic on a single thread")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False), help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catattn", description=__doc__)
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train and write model.ckpt, factors.csv, metrics.csv",
        "eval": "evaluate a checkpoint",
        "export-attn": "write spatial attention maps as PGM files",
        "ablate": "train every ablation arm and write ablation.csv",
    }
    cmds = {name: sub.add_parser(name, help=text) for name, text in helps.items()}
    for p in cmds.values():
        _add_common(p, suppress=True)
    for name in ("eval", "export-attn"):
        cmds[name].add_argument("--checkpoint", help="defaults to <export_dir>/model.ckpt")
    cmds["eval"].add_argument("--split", choices=("val", "train"), default="val")
    p = cmds["export-attn"]
    p.add_argument("--images", help="CIFAR binary file; default is the configured validation split")
    p.add_argument("--index", help="comma list of image indices")
    p.add_argument("--count", type=int, default=4, help="first N images when --index is not given")
    p.add_argument("--layer", help="comma list of block names, e.g. stage1.block1 (default: all)")
    p.add_argument("--out", help="output directory (default <export_dir>/attention)")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        extra = {}
        if args.seed is not None:
            extra["seed"] = args.seed
        if args.verify:
            extra["verify"] = True
        cfg = load_config(args.config, args.override, **extra)
        return COMMANDS[args.command](cfg, args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
