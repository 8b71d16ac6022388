"""Command line entry point: ``geomae <command> [options]``.

Exit status is 0 on success, 1 on a usage error and 2 when the command fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import load_dataset, missing_rate_histogram, synth_generate, write_dataset
from .errors import ContractError, GeoMAEError
from .harness.checkpoint import Checkpoint
from .harness.config import TrainConfig, load_config, parse_config_text
from .harness.experiments import (VARIANT_LABELS, VARIANTS, ablate, evaluate_grid, read_rows, report,
                                  write_rows)
from .harness.trainer import Trainer, split_dataset
from .masking import PATTERNS, derive_rng, generate, save_masks

log = logging.getLogger("geomae")

SYNTH_START = "2020-01-01T00:00"
DATA_FILE = "data.csv"
SCHEMA_FILE = "schema.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default="desk", help="config file, or a preset name: desk, full (default: desk)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="directory for outputs (default: .)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. --set train.epochs=5 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help=f"dataset CSV, or a directory holding {DATA_FILE}")
    p.add_argument("--schema", type=Path, help=f"schema JSON (default: {SCHEMA_FILE} next to the data file)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geomae", description="Missing-value robust spatio-temporal forecasting.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    common = _common()

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic station dataset")
    p.add_argument("--nodes", type=int, help="number of stations (default: synth.n_nodes)")
    p.add_argument("--steps", type=int, help="number of hourly steps (default: synth.steps)")

    p = sub.add_parser("masks", parents=[common], help="fabricate and export mask grids")
    p.add_argument("--patterns", nargs="+", choices=PATTERNS, help="default: eval.patterns")
    p.add_argument("--rates", nargs="+", type=float, help="default: eval.rates")
    p.add_argument("--count", type=int, default=16, help="masks per (pattern, rate) file")
    p.add_argument("--shape", nargs=3, type=int, metavar=("NODES", "STEPS", "FEATURES"),
                   help="default: synth.n_nodes, data.n_in, synth.d_in")

    p = sub.add_parser("train", parents=[common], help="train a model")
    _data_args(p)
    p.add_argument("--resume", type=Path,
                   help="continue from a checkpoint up to train.epochs total; other settings come from the checkpoint")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the evaluation grid")
    _data_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--label", default="GeoMAE", help="scenario label written to the result rows")

    p = sub.add_parser("ablate", parents=[common], help="train and score ablation variants")
    _data_args(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--train-seeds", type=int, default=1, help="number of training seeds per variant")

    p = sub.add_parser("report", parents=[common], help="aggregate result rows into tables and plots")
    p.add_argument("results", nargs="+", type=Path, help="result CSV files")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("stats", parents=[common], help="per-station missing-rate summary")
    _data_args(p)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--plot", action="store_true", help="also write a histogram image")
    return parser


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config)
    if args.set:
        lines = []
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            lines.append(item)
        try:
            cfg = parse_config_text("\n".join(lines), base=cfg)
        except ContractError as exc:
            raise UsageError(f"--set: {exc}") from None
    if args.seed is not None:
        cfg = cfg.with_values(**{"train.seed": args.seed, "synth.seed": args.seed})
    return cfg


def _load_data(args):
    path = args.data
    if path.is_dir():
        path = path / DATA_FILE
    schema = args.schema or path.with_name(SCHEMA_FILE)
    return load_dataset(path, schema)


def cmd_synth(args, cfg: TrainConfig) -> None:
    s = cfg.synth
    ds = synth_generate(args.nodes or s.n_nodes, args.steps or s.steps, s.d_in, s.seed,
                        np.datetime64(SYNTH_START), noise=s.noise, organic_rate=s.organic_rate)
    write_dataset(ds, args.out_dir / DATA_FILE, args.out_dir / SCHEMA_FILE)
    print(f"wrote {ds.n_nodes} stations x {ds.n_steps} steps to {args.out_dir / DATA_FILE}")


def cmd_masks(args, cfg: TrainConfig) -> None:
    shape = tuple(args.shape) if args.shape else (cfg.synth.n_nodes, cfg.data.n_in, cfg.synth.d_in)
    seed = cfg.train.seed
    for pattern in args.patterns or cfg.eval.patterns:
        for rate in args.rates or cfg.eval.rates:
            masks = [generate(pattern, shape, rate, derive_rng(seed, PATTERNS.index(pattern), int(round(rate * 10_000)), i),
                              cfg.mask.block_min_len, cfg.mask.block_max_len or None) for i in range(args.count)]
            path = args.out_dir / f"masks_{pattern}_{int(round(rate * 100)):02d}.gmk"
            save_masks(path, masks)
            realized = float(np.mean(masks))
            print(f"{path}: {args.count} masks of shape {shape}, realized rate {realized:.4f}")


def cmd_train(args, cfg: TrainConfig) -> None:
    ds = _load_data(args)
    if args.resume:
        ckpt = Checkpoint.load(args.resume)
        trainer = Trainer.resume(ckpt, split_dataset(ckpt.config, ds), args.out_dir)
        result = trainer.fit(cfg.train.epochs)  # the stored run settings apply except the epoch budget
    else:
        result = Trainer(cfg, split_dataset(cfg, ds), args.out_dir).fit()
    result.checkpoint.save(args.out_dir / "best.ckpt")
    history = [{k: v for k, v in h.items()} for h in result.history]
    (args.out_dir / "history.json").write_text(json.dumps(history, indent=1))
    ck = result.checkpoint
    print(f"trained {ck.epoch} epochs; best validation MAE {ck.best_val:.4f} at epoch {ck.best_epoch}")


def cmd_eval(args, cfg: TrainConfig) -> None:
    ds = _load_data(args)
    ckpt = Checkpoint.load(args.checkpoint)
    rows = evaluate_grid(ckpt, ds, scenario=args.label)
    write_rows(args.out_dir / "results.csv", rows)
    print(report(rows, args.out_dir, plots=False), end="")


def cmd_ablate(args, cfg: TrainConfig) -> None:
    ds = _load_data(args)
    rows = []
    for variant in args.variants:
        for s in range(args.train_seeds):
            run_cfg = cfg.with_values(**{"train.seed": cfg.train.seed + s})
            log.info("training %s with seed %d", VARIANT_LABELS[variant], run_cfg.train.seed)
            part, _ = ablate(run_cfg, ds, variant, out_dir=args.out_dir / f"seed{run_cfg.train.seed}")
            rows.extend(part)
    write_rows(args.out_dir / "results.csv", rows)
    print(report(rows, args.out_dir, plots=False), end="")


def cmd_report(args, cfg: TrainConfig) -> None:
    rows = [r for path in args.results for r in read_rows(path)]
    print(report(rows, args.out_dir, plots=not args.no_plots), end="")


def cmd_stats(args, cfg: TrainConfig) -> None:
    ds = _load_data(args)
    summary = ds.missing_summary()
    lines = ["station,missing_rate"] + [f"{k},{v:.6f}" for k, v in summary.items()]
    (args.out_dir / "missing_rates.csv").write_text("\n".join(lines) + "\n")
    print(f"overall missing rate {float(ds.missing.mean()):.4f} over {ds.n_nodes} stations")
    for lo, hi, count in missing_rate_histogram(list(summary.values()), args.bins):
        print(f"[{lo:.3f}, {hi:.3f}) {count:4d} {'#' * count}")
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.hist(list(summary.values()), bins=args.bins, range=(0, 1))
        ax.set_xlabel("missing rate")
        ax.set_ylabel("stations")
        fig.tight_layout()
        fig.savefig(args.out_dir / "missing_rates.png", dpi=100)
        plt.close(fig)


COMMANDS = {
    "synth": cmd_synth,
    "masks": cmd_masks,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"geomae: error: {exc}", file=sys.stderr)
        return 1
    except (GeoMAEError, ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"geomae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0
