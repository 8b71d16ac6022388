"""Evaluation grid, ablation variants, result rows and reports."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..data import SplitData, StationDataset, WindowSet
from ..errors import ContractError, SchemaError
from ..masking import PATTERNS, derive_rng, generate
from ..metrics import MetricReport, evaluate
from ..stafn import StafnModel
from .checkpoint import Checkpoint
from .config import TrainConfig
from .trainer import STREAM_EVAL, Trainer, corrupt_inputs, model_from_checkpoint, predict_raw, raw_targets, split_dataset

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("scenario", "pattern", "rate", "seed", "metric", "value")
METRICS = ("mae", "rmse", "smape")
VARIANTS = ("full", "fm", "nm", "01")
VARIANT_LABELS = {"full": "GeoMAE", "fm": "GeoMAE-FM", "nm": "GeoMAE-NM", "01": "GeoMAE-01"}


@dataclass(frozen=True)
class ResultRow:
    scenario: str
    pattern: str
    rate: float
    seed: int
    metric: str
    value: float


# corruption and scoring


def scenario_masks(windows: WindowSet, pattern: str, rate: float, seed: int, min_len: int = 2,
                   max_len: int | None = None) -> tuple[list[np.ndarray], list[np.random.Generator]]:
    """One extra mask and one imputation stream per window; depends only on the scenario."""
    shape = (windows.x_std.shape[0], windows.n_in, windows.x_std.shape[2])
    pattern_key = PATTERNS.index(pattern)
    rate_key = int(round(rate * 10_000))
    masks, rngs = [], []
    for i in range(len(windows)):
        rng = derive_rng(seed, STREAM_EVAL, pattern_key, rate_key, i)
        masks.append(generate(pattern, shape, rate, rng, min_len, max_len))
        rngs.append(rng)
    return masks, rngs


def evaluate_scenario(model: StafnModel, data: SplitData, config: TrainConfig, pattern: str, rate: float,
                      seed: int, windows: WindowSet | None = None) -> MetricReport:
    """Corrupt the test windows with one (pattern, rate, seed) scenario and score raw-unit forecasts."""
    windows = windows if windows is not None else data.test
    if len(windows) == 0:
        raise ContractError("no evaluation windows")
    idx = np.arange(len(windows))
    masks, rngs = scenario_masks(windows, pattern, rate, seed, config.mask.block_min_len,
                                 config.mask.block_max_len or None)
    inputs = corrupt_inputs(windows, idx, masks, rngs, config.preprocess.sigma, config.preprocess.hint_mode)
    y_hat = predict_raw(model, inputs, data.target_stats, config.eval.batch_size)
    y, ym = raw_targets(windows, idx, data.target_stats)
    return evaluate(y_hat, y, ym)


def evaluate_model(model: StafnModel, data: SplitData, config: TrainConfig, scenario: str,
                   patterns: Sequence[str], rates: Sequence[float], seeds: Iterable[int]) -> list[ResultRow]:
    rows = []
    for pattern in patterns:
        for rate in rates:
            for seed in seeds:
                report = evaluate_scenario(model, data, config, pattern, rate, seed)
                rows.extend(ResultRow(*r) for r in report.rows(scenario, pattern, float(rate), int(seed)))
    return rows


def evaluate_grid(checkpoint: Checkpoint, dataset: StationDataset, patterns: Sequence[str] | None = None,
                  rates: Sequence[float] | None = None, seeds: Iterable[int] | None = None,
                  scenario: str = "GeoMAE") -> list[ResultRow]:
    """Score the best weights of ``checkpoint`` over every (pattern, rate, seed) scenario."""
    cfg = checkpoint.config
    patterns = tuple(patterns or cfg.eval.patterns)
    rates = tuple(cfg.eval.rates if rates is None else rates)
    seeds = tuple(range(cfg.eval.seeds) if seeds is None else seeds)
    data = split_dataset(cfg, dataset)
    if not (np.allclose(data.stats.mean, checkpoint.stats.mean) and np.allclose(data.stats.std, checkpoint.stats.std)):
        log.warning("dataset statistics differ from those stored in the checkpoint")
    model = model_from_checkpoint(checkpoint, best=True)
    return evaluate_model(model, data, cfg, scenario, patterns, rates, seeds)


# ablation


def variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    """Apply one ablation switch; every other setting is kept."""
    if variant == "full":
        return config
    if variant == "fm":
        return replace(config, mask=replace(config.mask, train_rate_range=(0.5, 0.5)))
    if variant == "nm":
        return replace(config, preprocess=replace(config.preprocess, sigma=0.0, hint_mode="none"))
    if variant == "01":
        return replace(config, preprocess=replace(config.preprocess, sigma=0.0, hint_mode="binary"))
    raise ContractError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")


def ablate(config: TrainConfig, dataset: StationDataset, variant: str, patterns: Sequence[str] | None = None,
           rates: Sequence[float] | None = None, seeds: Iterable[int] | None = None,
           out_dir=None) -> tuple[list[ResultRow], Checkpoint]:
    """Train one ablation variant and score it on the evaluation grid."""
    cfg = variant_config(config, variant)
    out = Path(out_dir) / variant if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    result = Trainer(cfg, split_dataset(cfg, dataset), out).fit()
    rows = evaluate_grid(result.checkpoint, dataset, patterns, rates, seeds, scenario=VARIANT_LABELS[variant])
    return rows, result.checkpoint


# result files


def write_rows(path, rows: Iterable[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow((r.scenario, r.pattern, repr(float(r.rate)), int(r.seed), r.metric, repr(float(r.value))))


def read_rows(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != RESULT_COLUMNS:
            raise SchemaError(f"{path}: expected header {','.join(RESULT_COLUMNS)}, got {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(RESULT_COLUMNS):
                raise SchemaError(f"{path}:{lineno}: expected {len(RESULT_COLUMNS)} fields, got {len(rec)}")
            try:
                rows.append(ResultRow(rec[0], rec[1], float(rec[2]), int(rec[3]), rec[4], float(rec[5])))
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return rows


# aggregation and report


def summarize(rows: Iterable[ResultRow]) -> dict[tuple[str, str, float, str], tuple[float, float, int]]:
    """Mean and population std across seeds per (scenario, pattern, rate, metric)."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[(r.scenario, r.pattern, r.rate, r.metric)].append(r.value)
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in sorted(groups.items())}


def median_by(rows: Iterable[ResultRow], metric: str = "mae") -> dict[tuple[str, str, float], float]:
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        if r.metric == metric:
            groups[(r.scenario, r.pattern, r.rate)].append(r.value)
    return {k: float(np.median(v)) for k, v in groups.items()}


def format_table(rows: Iterable[ResultRow]) -> str:
    """Text table with one line per (scenario, pattern, rate) and ``mean ± std`` cells."""
    summary = summarize(rows)
    keys = sorted({k[:3] for k in summary})
    metrics = [m for m in METRICS if any(k[3] == m for k in summary)]
    metrics += sorted({k[3] for k in summary} - set(metrics))
    header = ["scenario", "pattern", "rate"] + metrics
    lines = [header]
    for key in keys:
        cells = [key[0], key[1], f"{key[2]:.2f}"]
        for m in metrics:
            if (*key, m) in summary:
                mu, sd, _ = summary[(*key, m)]
                cells.append(f"{mu:.4f} ± {sd:.4f}")
            else:
                cells.append("-")
        lines.append(cells)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines) + "\n"


def plot_rows(rows: Sequence[ResultRow], out_dir) -> list[Path]:
    """One line chart of metric against rate per (pattern, metric); returns the written files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = summarize(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for pattern in sorted({k[1] for k in summary}):
        for metric in sorted({k[3] for k in summary}):
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for scenario in sorted({k[0] for k in summary}):
                pts = sorted((k[2], v) for k, v in summary.items() if k[0] == scenario and k[1] == pattern and k[3] == metric)
                if not pts:
                    continue
                xs = [p[0] for p in pts]
                mu = np.array([p[1][0] for p in pts])
                sd = np.array([p[1][1] for p in pts])
                ax.errorbar(xs, mu, yerr=sd, marker="o", capsize=3, label=scenario)
            ax.set_xlabel("missing rate")
            ax.set_ylabel(metric.upper())
            ax.set_title(f"{pattern} missing")
            ax.legend()
            fig.tight_layout()
            path = out_dir / f"{metric}_{pattern}.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)
    return written


@dataclass
class OrderingCheck:
    description: str
    left: float
    right: float

    @property
    def holds(self) -> bool:
        return self.left <= self.right

    def to_text(self) -> str:
        status = "ok" if self.holds else "FAILED"
        return f"[{status}] {self.description}: {self.left:.4f} <= {self.right:.4f}"


def ablation_checks(rows: Sequence[ResultRow], pattern: str = "point", high_rate: float = 0.9) -> list[OrderingCheck]:
    """Expected median-MAE orderings between the full model and its ablations.

    GeoMAE <= GeoMAE-01 <= GeoMAE-NM at ``high_rate``, and GeoMAE <= GeoMAE-FM at
    every evaluated rate other than 0.5.  Orderings whose variants are absent
    from ``rows`` are skipped.
    """
    med = median_by(rows, "mae")
    full, fm, nm, zo = (VARIANT_LABELS[v] for v in VARIANTS)
    checks = []

    def add(desc, a, b):
        if a in med and b in med:
            checks.append(OrderingCheck(desc, med[a], med[b]))

    add(f"{full} <= {zo} at {pattern} {high_rate:.2f}", (full, pattern, high_rate), (zo, pattern, high_rate))
    add(f"{zo} <= {nm} at {pattern} {high_rate:.2f}", (zo, pattern, high_rate), (nm, pattern, high_rate))
    for rate in sorted({r.rate for r in rows if r.pattern == pattern}):
        if not math.isclose(rate, 0.5):
            add(f"{full} <= {fm} at {pattern} {rate:.2f}", (full, pattern, rate), (fm, pattern, rate))
    return checks


def report(rows: Sequence[ResultRow], out_dir, plots: bool = True) -> str:
    """Write ``table.txt`` (and plots) under ``out_dir``; returns the table text."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = format_table(rows)
    checks = ablation_checks(rows)
    if checks:
        text += "\nablation ordering (median MAE across seeds)\n" + "".join(c.to_text() + "\n" for c in checks)
    (out_dir / "table.txt").write_text(text)
    if plots:
        plot_rows(rows, out_dir)
    return text
