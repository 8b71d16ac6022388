"""Synthetic missing-value masks and augmented variants.

All masks have shape ``(n_nodes, n_steps, n_features)`` with 1 marking a
missing entry.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .preprocess import ReadingWindow, preprocess_sample

PATTERNS = ("point", "row", "column", "block")

MASK_MAGIC = b"GMK"
MASK_VERSION = 1
_HEADER = struct.Struct("<3sBIII")  # magic, version, N_l, N_in, D_in: 16 bytes


def _check_rate(rate: float) -> float:
    rate = float(rate)
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"missing rate must lie in [0, 1], got {rate}")
    return rate


def _check_shape(shape) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise DimensionError(f"mask shape must be (nodes, steps, features) with positive extents, got {shape}")
    return shape


def gen_point(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(rate) per entry."""
    shape = _check_shape(shape)
    rate = _check_rate(rate)
    return (rng.random(shape) < rate).astype(np.uint8)


def gen_row(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Drop every feature of a (node, step) pair with probability ``rate``."""
    n, t, d = _check_shape(shape)
    rate = _check_rate(rate)
    pairs = rng.random((n, t, 1)) < rate
    return np.broadcast_to(pairs, (n, t, d)).astype(np.uint8)


def gen_column(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Drop a (node, feature) pair across the whole window with probability ``rate``."""
    n, t, d = _check_shape(shape)
    rate = _check_rate(rate)
    pairs = rng.random((n, 1, d)) < rate
    return np.broadcast_to(pairs, (n, t, d)).astype(np.uint8)


def gen_block(
    shape,
    rate: float,
    rng: np.random.Generator,
    min_len: int = 2,
    max_len: int | None = None,
) -> np.ndarray:
    """Contiguous per-node time spans covering all features.

    Spans of length uniform in ``[min_len, max_len]`` are placed until the
    masked fraction reaches ``rate``.  A span is shortened to the number of
    (node, step) cells still needed, but never below ``min_len``, so the
    overshoot is under ``min_len / (n_steps * n_nodes)``.
    """
    n, t, d = _check_shape(shape)
    rate = _check_rate(rate)
    if max_len is None:
        max_len = t
    if not 1 <= min_len <= max_len <= t:
        raise ContractError(f"need 1 <= min_len <= max_len <= {t}, got min_len={min_len}, max_len={max_len}")
    covered = np.zeros((n, t), dtype=bool)
    target = rate * n * t
    count = 0
    while count < target - 1e-9:
        length = int(rng.integers(min_len, max_len + 1))
        length = min(length, max(min_len, math.ceil(target - count - 1e-9)))
        node = int(rng.integers(n))
        start = int(rng.integers(0, t - length + 1))
        span = covered[node, start : start + length]
        count += int(length - span.sum())
        span[:] = True
    return np.broadcast_to(covered[:, :, None], (n, t, d)).astype(np.uint8)


def compose(base_m: np.ndarray, extra_m: np.ndarray) -> np.ndarray:
    """Elementwise OR of two masks."""
    base_m, extra_m = np.asarray(base_m), np.asarray(extra_m)
    if base_m.shape != extra_m.shape:
        raise DimensionError(f"cannot compose masks of shapes {base_m.shape} and {extra_m.shape}")
    return (base_m.astype(bool) | extra_m.astype(bool)).astype(np.uint8)


@dataclass(frozen=True)
class MaskSpec:
    """A missing-pattern scenario: pattern (or mixture) plus a fixed rate or a rate range."""

    pattern: str = "mixed"
    rate: float | None = None
    rate_range: tuple[float, float] | None = (0.25, 0.90)
    mix_weights: dict[str, float] = field(default_factory=lambda: {"point": 1 / 3, "row": 1 / 3, "column": 1 / 3})
    seed: int = 0
    min_len: int = 2
    max_len: int | None = None

    def __post_init__(self):
        if self.pattern not in PATTERNS + ("mixed",):
            raise ContractError(f"unknown pattern {self.pattern!r}")
        if (self.rate is None) == (self.rate_range is None):
            raise ContractError("exactly one of rate and rate_range must be set")
        if self.rate is not None:
            _check_rate(self.rate)
        else:
            lo, hi = (float(v) for v in self.rate_range)
            _check_rate(lo), _check_rate(hi)
            if lo > hi:
                raise ContractError(f"rate_range lower bound {lo} exceeds upper bound {hi}")
            object.__setattr__(self, "rate_range", (lo, hi))
        if self.pattern == "mixed":
            weights = dict(self.mix_weights)
            unknown = set(weights) - set(PATTERNS)
            if unknown:
                raise ContractError(f"unknown patterns in mix_weights: {sorted(unknown)}")
            if any(w < 0 for w in weights.values()):
                raise ContractError("mix_weights must be non-negative")
            if abs(sum(weights.values()) - 1.0) > 1e-9:
                raise ContractError(f"mix_weights must sum to 1, got {sum(weights.values())}")

    def draw(self, shape, rng: np.random.Generator) -> tuple[np.ndarray, str, float]:
        """Draw one mask; returns ``(mask, pattern, requested_rate)``."""
        if self.pattern == "mixed":
            names = sorted(self.mix_weights)
            probs = np.array([self.mix_weights[k] for k in names], dtype=np.float64)
            pattern = names[int(rng.choice(len(names), p=probs / probs.sum()))]
        else:
            pattern = self.pattern
        if self.rate is not None:
            rate = self.rate
        else:
            lo, hi = self.rate_range
            rate = float(rng.uniform(lo, hi)) if hi > lo else lo
        return generate(pattern, shape, rate, rng, self.min_len, self.max_len), pattern, rate


def generate(pattern: str, shape, rate: float, rng, min_len: int = 2, max_len: int | None = None) -> np.ndarray:
    if pattern == "point":
        return gen_point(shape, rate, rng)
    if pattern == "row":
        return gen_row(shape, rate, rng)
    if pattern == "column":
        return gen_column(shape, rate, rng)
    if pattern == "block":
        return gen_block(shape, rate, rng, min_len, max_len)
    raise ContractError(f"unknown pattern {pattern!r}")


def derive_rng(*keys: int) -> np.random.Generator:
    """Independent generator for a tuple of integer keys (e.g. seed, sample, variant)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


@dataclass(frozen=True)
class Variant:
    x_hat: np.ndarray
    hint: np.ndarray
    m: np.ndarray


@dataclass(frozen=True)
class AugmentedSet:
    """k extra-masked copies of one base sample."""

    variants: tuple[Variant, ...]

    def __post_init__(self):
        if not self.variants:
            raise ContractError("an augmented set needs at least one variant")

    @property
    def k(self) -> int:
        return len(self.variants)

    def __iter__(self):
        return iter(self.variants)

    def __len__(self):
        return len(self.variants)


def make_augmented(
    sample: ReadingWindow,
    k: int,
    spec: MaskSpec,
    sigma: float,
    rng: np.random.Generator,
    hint_mode: str = "hint",
) -> AugmentedSet:
    """Add an extra mask from ``spec`` to ``sample`` k times, re-imputing and re-hinting each copy."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    variants = []
    for child in rng.spawn(k):
        extra, _, _ = spec.draw(sample.m.shape, child)
        m = compose(sample.m, extra)
        x_hat, hint = preprocess_sample(ReadingWindow(sample.x, m), sigma, child, hint_mode)
        variants.append(Variant(x_hat, hint, m))
    return AugmentedSet(tuple(variants))


def save_masks(path, masks: Sequence[np.ndarray] | np.ndarray) -> None:
    """Write masks of a common shape as a 16-byte header followed by one byte per entry."""
    masks = np.asarray(masks, dtype=np.uint8)
    if masks.ndim == 3:
        masks = masks[None]
    if masks.ndim != 4:
        raise DimensionError(f"expected (count, nodes, steps, features), got {masks.shape}")
    if not np.isin(masks, (0, 1)).all():
        raise ContractError("mask entries must be 0 or 1")
    _, n, t, d = masks.shape
    header = _HEADER.pack(MASK_MAGIC, MASK_VERSION, n, t, d)
    Path(path).write_bytes(header + np.ascontiguousarray(masks).tobytes())


def load_masks(path) -> np.ndarray:
    """Inverse of :func:`save_masks`; returns ``(count, nodes, steps, features)``."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ContractError(f"{path}: file too short for a mask header")
    magic, version, n, t, d = _HEADER.unpack_from(blob)
    if magic != MASK_MAGIC:
        raise ContractError(f"{path}: bad magic {magic!r}")
    if version != MASK_VERSION:
        raise ContractError(f"{path}: unsupported mask file version {version}")
    payload = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size)
    per = n * t * d
    if per == 0 or payload.size % per:
        raise ContractError(f"{path}: payload of {payload.size} bytes is not a multiple of {per}")
    return payload.reshape(-1, n, t, d).copy()
