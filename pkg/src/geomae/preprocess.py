"""Input preprocessing: standardization, random-normal fill and the hint tensor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError

CONSTANT_STD = 1e-8
DEGENERATE_STD = 1e-12
DEFAULT_SIGMA = 0.2

HINT_MODES = ("hint", "binary", "none")


@dataclass(frozen=True)
class StandardizationStats:
    """Per-feature mean and std, fitted on observed training entries."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise DimensionError(f"mean has {mean.size} features, std has {std.size}")
        if (std < 0).any():
            raise ContractError("standard deviations must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def n_features(self) -> int:
        return self.mean.size

    @property
    def constant(self) -> np.ndarray:
        return self.std < CONSTANT_STD

    def select(self, features) -> StandardizationStats:
        return StandardizationStats(self.mean[features], self.std[features])

    @classmethod
    def fit(cls, values: np.ndarray, missing: np.ndarray) -> StandardizationStats:
        """Fit on ``values[..., D]`` ignoring entries where ``missing`` is 1."""
        values = np.asarray(values, dtype=np.float64)
        observed = np.asarray(missing) == 0
        flat_v = values.reshape(-1, values.shape[-1])
        flat_o = observed.reshape(-1, values.shape[-1])
        counts = flat_o.sum(axis=0)
        safe = np.maximum(counts, 1)
        mean = np.where(flat_o, flat_v, 0.0).sum(axis=0) / safe
        var = np.where(flat_o, (flat_v - mean) ** 2, 0.0).sum(axis=0) / safe
        return cls(mean, np.sqrt(var))


def standardize(raw: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    """``(raw - mean) / std`` per feature; constant features map to 0."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != stats.n_features:
        raise DimensionError(f"expected {stats.n_features} features, got trailing extent {raw.shape[-1]}")
    const = stats.constant
    denom = np.where(const, 1.0, stats.std)
    out = (raw - stats.mean) / denom
    return np.where(const, 0.0, out)


def destandardize(z: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != stats.n_features:
        raise DimensionError(f"expected {stats.n_features} features, got trailing extent {z.shape[-1]}")
    return z * stats.std + stats.mean


def _check_binary(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if not np.isin(m, (0, 1)).all():
        raise ContractError("mask entries must be 0 or 1")
    return m.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class ReadingWindow:
    """Standardized readings ``x`` with missing indicator ``m`` (1 = missing).

    Values of ``x`` at missing positions are placeholders.
    """

    x: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        m = _check_binary(self.m)
        if x.shape != m.shape:
            raise DimensionError(f"readings {x.shape} and mask {m.shape} differ in shape")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "m", m)

    @property
    def missing_rate(self) -> float:
        return float(self.m.mean())


def impute_random(w: ReadingWindow, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Copy observed entries and fill missing ones with Normal(0, sigma^2) draws.

    One normal draw is consumed per missing entry, in row-major order.
    """
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    out = w.x.copy()
    holes = w.m == 1
    n = int(holes.sum())
    if n:
        out[holes] = rng.normal(0.0, 1.0, size=n) * sigma
    return out


def build_hint(m: np.ndarray) -> np.ndarray:
    """Standardized balanced mask: +1 observed / -1 missing, then zero mean, unit popstd.

    Windows that are fully observed or fully missing give all zeros.
    """
    m = _check_binary(m)
    sym = 1.0 - 2.0 * m.astype(np.float64)
    mu = sym.mean()
    sd = sym.std()
    if sd < DEGENERATE_STD:
        return np.zeros_like(sym)
    return (sym - mu) / sd


def hint_channel(m: np.ndarray, mode: str = "hint") -> np.ndarray:
    """Mask channel fed to the model: standardized hint, raw 0/1 mask, or zeros."""
    if mode == "hint":
        return build_hint(m)
    m = _check_binary(m)
    if mode == "binary":
        return m.astype(np.float64)
    if mode == "none":
        return np.zeros(m.shape)
    raise ContractError(f"unknown hint mode {mode!r}; expected one of {HINT_MODES}")


def preprocess_sample(
    w: ReadingWindow,
    sigma: float,
    rng: np.random.Generator,
    hint_mode: str = "hint",
) -> tuple[np.ndarray, np.ndarray]:
    """Imputed readings and mask channel for one window."""
    return impute_random(w, sigma, rng), hint_channel(w.m, hint_mode)
