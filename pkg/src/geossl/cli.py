"""Command-line entry point: generate, pretrain, evaluate, ablate, report."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .harness import (RunReport, grid_variant, knn_evaluate, linear_probe, pretrain, run_ablation,
                      spearman_alignment, write_csv, export_embeddings, encoder_config)
from .model import Encoder, load_checkpoint, save_checkpoint
from .report import ReportError, make_report
from .synthdata import dataset_summary, generate, load_dataset

log = logging.getLogger("geossl")


class CliError(RuntimeError):
    pass


def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise cfgmod.ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("GEOSSL_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise cfgmod.ConfigError(f"GEOSSL_THREADS must be an integer, got {env!r}") from None


def _load_config(args, extra: dict[str, object]) -> cfgmod.AppConfig:
    overrides = _parse_set(args.set)
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return cfgmod.load(args.config, overrides)


def _run_dir(root: str, app: cfgmod.AppConfig, force: bool) -> Path:
    blob = json.dumps(app.to_dict(), sort_keys=True).encode()
    digest = hashlib.sha256(blob).hexdigest()[:10]
    stamp = time.strftime("%Y%m%dT%H%M%S")
    path = Path(root) / f"run_{stamp}_{digest}"
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"run directory {path} already exists (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(app.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def _check_finite(report: RunReport, *names: str) -> None:
    for n in names:
        v = getattr(report, n)
        if not math.isfinite(v):
            raise CliError(f"metric {n} is not finite ({v})")


# ------------------------------------------------------------------ commands

def cmd_generate(args) -> int:
    app = _load_config(args, {"dataset.seed": args.seed, "dataset.path": args.out})
    out = app.dataset["path"]
    manifest = generate(app.synth_config(), out, force=args.force)
    load_dataset(out)  # validate what was written
    print(dataset_summary(manifest))
    print(f"wrote {out}")
    return 0


def cmd_pretrain(args) -> int:
    app = _load_config(args, {"train.seed": args.seed, "dataset.path": args.dataset})
    rc = app.run_config()
    ds = load_dataset(rc.dataset)
    run = _run_dir(args.out, app, args.force)

    def progress(stats):
        log.info("epoch %d  ssl %.4f  reg %s  total %.4f", stats.epoch, stats.loss_ssl,
                 "-" if stats.loss_reg is None else f"{stats.loss_reg:.4f}", stats.loss_total)

    enc, report = pretrain(rc, ds, progress=progress)
    ckpt = run / "checkpoint.gslc"
    save_checkpoint(ckpt, enc)
    if load_checkpoint(ckpt).to_bytes() != enc.to_bytes():
        raise CliError("checkpoint failed to round-trip")
    write_csv(report.rows(), run / "metrics.csv")
    export_embeddings(enc, ds, run / "embeddings.f32")
    _check_finite(report, "knn_acc_macro")
    print(f"knn_acc_macro={report.knn_acc_macro:.4f} linear_acc_macro={report.linear_acc_macro:.4f} "
          f"spearman_geo={report.spearman_geo:.4f}")
    print(f"wrote {run}")
    return 0


def cmd_evaluate(args) -> int:
    app = _load_config(args, {"train.seed": args.seed, "dataset.path": args.dataset,
                              "eval.protocol": args.protocol, "eval.checkpoint": args.checkpoint})
    rc = app.run_config()
    ds = load_dataset(rc.dataset)
    ckpt = app.eval["checkpoint"]
    if ckpt:
        if not Path(ckpt).exists():
            raise CliError(f"checkpoint not found: {ckpt}")
        enc = load_checkpoint(ckpt)
        if enc.cfg.in_dim != int(np.prod(ds.shape)):
            raise CliError(f"checkpoint expects {enc.cfg.in_dim} input features, "
                           f"dataset patches have {int(np.prod(ds.shape))}")
    else:
        enc = Encoder.init(encoder_config(rc, ds), seed=rc.seed)
    protocol = app.eval["protocol"]
    run = _run_dir(args.out, app, args.force)
    t0 = time.perf_counter()
    report = RunReport(rc)
    if protocol in ("knn", "all"):
        report.knn_acc_macro = knn_evaluate(enc, ds, rc.knn_k, rc.knn_sharpening)
    if protocol in ("linear", "all"):
        report.linear_acc_macro = linear_probe(enc, ds, rc.probe_epochs, seed=rc.seed)
    if protocol in ("spearman", "all"):
        report.spearman_geo = spearman_alignment(enc, ds, rc.loss.d_max, seed=rc.seed)
    report.wallclock_s = time.perf_counter() - t0
    report.axis = "evaluate"
    write_csv([report.summary_row()], run / "metrics.csv")
    result = {"protocol": protocol, "checkpoint": ckpt or None, "knn_acc_macro": report.knn_acc_macro,
              "linear_acc_macro": report.linear_acc_macro, "spearman_geo": report.spearman_geo}
    (run / "evaluation.json").write_text(json.dumps(result, indent=1) + "\n")
    for k, v in result.items():
        if k.endswith(("macro", "geo")) and not (isinstance(v, float) and math.isnan(v)):
            print(f"{k}={v:.4f}")
    print(f"wrote {run}")
    return 0


def cmd_ablate(args) -> int:
    extra = {"ablation.axis": args.axis, "dataset.path": args.dataset}
    if args.seed is not None:
        extra["ablation.seeds"] = [args.seed]
    if args.grid:
        extra["ablation.grid"] = args.grid
    app = _load_config(args, extra)
    rc = app.run_config()
    axis = app.ablation["axis"]
    grid = app.ablation["grid"] or cfgmod.DEFAULT_GRIDS[axis]
    ds = load_dataset(rc.dataset)
    for point in grid:  # fail on bad grid points before any training
        grid_variant(axis, point, rc, ds)
    run = _run_dir(args.out, app, args.force)
    threads = _threads(args)
    rows = run_ablation(axis, grid, rc, seeds=[int(s) for s in app.ablation["seeds"]],
                        threads=threads, ds=None if threads > 1 else ds)
    path = run / f"ablation_{axis}.csv"
    write_csv(rows, path)
    print(f"{len(rows)} rows -> {path}")
    return 0


def cmd_report(args) -> int:
    if not args.csv:
        raise CliError("report needs at least one CSV path")
    for p in args.csv:
        if not Path(p).exists():
            raise CliError(f"CSV not found: {p}")
    written = make_report(args.csv, args.out)
    for p in written:
        print(f"wrote {p}")
    print(Path(written[-1]).read_text(), end="")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML file with [dataset] [loss] [train] [eval] [ablation]")
    common.add_argument("--seed", type=int, help="seed override (dataset seed for generate, run seed otherwise)")
    common.add_argument("--out", metavar="DIR", help="output location")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--threads", type=int, help="parallel runs for ablate (fallback: $GEOSSL_THREADS)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", default=[],
                        help="override any config key; repeatable, wins over --config")
    common.add_argument("-v", "--verbose", action="store_true")

    epilog = cfgmod.help_text()
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="geossl", description=__doc__, epilog=epilog, formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], epilog=epilog, formatter_class=fmt,
                       help="write a synthetic GSD1 dataset (--out = dataset directory)")
    g.set_defaults(func=cmd_generate)

    for name, func, text in (("pretrain", cmd_pretrain, "self-supervised pre-training run"),
                             ("evaluate", cmd_evaluate, "evaluate a checkpoint (or a random encoder)"),
                             ("ablate", cmd_ablate, "run one ablation axis over 5 seeds")):
        sp = sub.add_parser(name, parents=[common], epilog=epilog, formatter_class=fmt, help=text)
        sp.add_argument("--dataset", metavar="DIR", help="dataset directory (dataset.path)")
        sp.set_defaults(func=func, out_default="runs")
        if name == "evaluate":
            sp.add_argument("--checkpoint", metavar="PATH")
            sp.add_argument("--protocol", choices=("knn", "linear", "spearman", "all"))
        if name == "ablate":
            sp.add_argument("--axis", choices=sorted(cfgmod.DEFAULT_GRIDS))
            sp.add_argument("--grid", help="comma-separated or python-literal list of grid points")

    r = sub.add_parser("report", parents=[common], epilog=epilog, formatter_class=fmt,
                       help="SVG charts and a summary table from metrics CSVs")
    r.add_argument("csv", nargs="*", help="metrics CSV files")
    r.set_defaults(func=cmd_report, out_default="report")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.out is None:
        args.out = getattr(args, "out_default", None)
    try:
        return args.func(args)
    except (cfgmod.ConfigError, ReportError, CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FileExistsError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
