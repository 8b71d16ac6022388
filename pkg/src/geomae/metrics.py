"""Masked regression metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, EmptyEvaluationError

SMAPE_EPS = 1e-8


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    smape: float
    count: int

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_text(self) -> str:
        return "\n".join(f"{k}={v!r}" for k, v in self.as_dict().items())

    def rows(self, scenario: str, pattern: str, rate: float, seed: int) -> list[tuple]:
        """Result-table rows ``(scenario, pattern, rate, seed, metric, value)``."""
        return [(scenario, pattern, rate, seed, name, getattr(self, name)) for name in ("mae", "rmse", "smape")]


def evaluate(y_hat, y, target_mask=None) -> MetricReport:
    """MAE, RMSE and SMAPE over entries where ``target_mask`` is 0.

    SMAPE uses ``2|e| / (|y| + |y_hat| + eps)`` so it lies in ``[0, 2]``.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise DimensionError(f"prediction {y_hat.shape} and target {y.shape} differ in shape")
    if target_mask is None:
        keep = np.ones(y.shape, dtype=bool)
    else:
        target_mask = np.asarray(target_mask)
        if target_mask.shape != y.shape:
            raise DimensionError(f"target mask {target_mask.shape} does not match target {y.shape}")
        keep = target_mask == 0
    count = int(keep.sum())
    if count == 0:
        raise EmptyEvaluationError("every target entry is masked; nothing to score")
    y_hat, y = y_hat[keep], y[keep]  # masked entries may hold anything, even NaN
    err = y_hat - y
    abs_err = np.abs(err)
    denom = np.abs(y) + np.abs(y_hat) + SMAPE_EPS
    # rescale before squaring so tiny or huge errors neither underflow nor overflow
    top = float(abs_err.max())
    rmse = top * math.sqrt(np.mean((abs_err / top) ** 2)) if top > 0 else 0.0
    return MetricReport(
        mae=float(abs_err.mean()),
        rmse=float(rmse),
        smape=float(np.mean(2.0 * abs_err / denom)),
        count=count,
    )
