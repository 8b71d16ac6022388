"""Station datasets: file IO, windowing, chronological splits and a synthetic generator.

Dataset files are delimited text::

    # geomae-dataset v1
    station_id,timestamp,<feature>,<feature>,...
    S00,2015-01-01T00:00,41.2,,0.8

An empty field is a missing reading.  The companion schema is JSON::

    {"format": "geomae-schema", "version": 1,
     "features": [{"name": "pm25", "unit": "ug/m3"}, ...],
     "target": ["pm25"], "interval_minutes": 60,
     "stations": [{"id": "S00", "lat": 39.9, "lon": 116.4}, ...]}

Optional ``"start"``/``"end"`` keys pin the timestamp grid; otherwise it spans
the first to last timestamp found in the data.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, SchemaError
from .preprocess import ReadingWindow, StandardizationStats, standardize
from .stafn import calendar_features

log = logging.getLogger(__name__)

DATA_HEADER = "# geomae-dataset v1"
SCHEMA_FORMAT = "geomae-schema"
SCHEMA_VERSION = 1
EARTH_RADIUS_KM = 6371.0088


def time_grid(start, end, interval_minutes: int) -> np.ndarray:
    """Equally spaced timestamps from ``start`` to ``end`` inclusive."""
    start = np.datetime64(start, "m")
    end = np.datetime64(end, "m")
    step = np.timedelta64(int(interval_minutes), "m")
    if end < start:
        raise ContractError(f"grid end {end} precedes start {start}")
    return np.arange(start, end + step, step)


@dataclass(frozen=True)
class StationSeries:
    station_id: str
    lat: float
    lon: float
    timestamps: np.ndarray
    values: np.ndarray  # [T, D]; placeholder 0 where missing
    observed: np.ndarray  # [T, D] bool

    @property
    def missing_rate(self) -> float:
        return float(1.0 - self.observed.mean())


@dataclass(frozen=True)
class GraphMeta:
    nodes: tuple[str, ...]
    distance_km: np.ndarray


def haversine_km(coords: np.ndarray) -> np.ndarray:
    """Pairwise great-circle distances for ``[N, 2]`` (lat, lon) degrees."""
    lat = np.radians(coords[:, 0])[:, None]
    lon = np.radians(coords[:, 1])[:, None]
    dlat = lat - lat.T
    dlon = lon - lon.T
    a = np.sin(dlat / 2) ** 2 + np.cos(lat) * np.cos(lat.T) * np.sin(dlon / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    return d


@dataclass
class StationDataset:
    """All stations aligned on one timestamp grid.

    ``values`` and ``missing`` are ``[nodes, time, features]``; values at
    missing entries are 0 placeholders.
    """

    station_ids: list[str]
    coords: np.ndarray
    feature_names: list[str]
    units: list[str]
    target: list[str]
    timestamps: np.ndarray
    interval_minutes: int
    values: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        n, t, d = self.values.shape
        if self.missing.shape != (n, t, d):
            raise SchemaError(f"missing mask {self.missing.shape} does not match values {self.values.shape}")
        if len(self.station_ids) != n or self.coords.shape != (n, 2):
            raise SchemaError("station metadata does not match the node axis")
        if len(self.feature_names) != d or len(self.units) != d:
            raise SchemaError("feature metadata does not match the feature axis")
        if len(self.timestamps) != t:
            raise SchemaError("timestamp count does not match the time axis")
        unknown = set(self.target) - set(self.feature_names)
        if unknown or not self.target:
            raise SchemaError(f"target features {sorted(unknown) or self.target} are not declared features")
        if t > 1:
            steps = np.diff(self.timestamps.astype("datetime64[m]")).astype(np.int64)
            if (steps != self.interval_minutes).any():
                raise SchemaError("timestamps are not equally spaced at the sampling interval")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    @property
    def target_index(self) -> list[int]:
        return [self.feature_names.index(name) for name in self.target]

    def station(self, i: int) -> StationSeries:
        return StationSeries(
            self.station_ids[i],
            float(self.coords[i, 0]),
            float(self.coords[i, 1]),
            self.timestamps,
            self.values[i],
            self.missing[i] == 0,
        )

    def __iter__(self) -> Iterator[StationSeries]:
        return (self.station(i) for i in range(self.n_nodes))

    def graph(self) -> GraphMeta:
        return GraphMeta(tuple(self.station_ids), haversine_km(self.coords))

    def missing_summary(self) -> dict[str, float]:
        """Fraction of missing entries per station."""
        rates = self.missing.reshape(self.n_nodes, -1).mean(axis=1)
        return dict(zip(self.station_ids, (float(r) for r in rates)))

    def schema(self) -> dict:
        return {
            "format": SCHEMA_FORMAT,
            "version": SCHEMA_VERSION,
            "features": [{"name": n, "unit": u} for n, u in zip(self.feature_names, self.units)],
            "target": list(self.target),
            "interval_minutes": int(self.interval_minutes),
            "start": str(self.timestamps[0].astype("datetime64[m]")),
            "end": str(self.timestamps[-1].astype("datetime64[m]")),
            "stations": [
                {"id": s, "lat": float(c[0]), "lon": float(c[1])} for s, c in zip(self.station_ids, self.coords)
            ],
        }


def missing_rate_histogram(rates: Sequence[float], bins: int = 10) -> list[tuple[float, float, int]]:
    """Counts of stations per missing-rate bin over ``[0, max_rate]``."""
    rates = np.asarray(list(rates), dtype=np.float64)
    top = max(float(rates.max()), 1e-12) if rates.size else 1.0
    counts, edges = np.histogram(rates, bins=bins, range=(0.0, top))
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


# file IO


def _read_schema(path) -> dict:
    try:
        schema = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from None
    if schema.get("format") != SCHEMA_FORMAT:
        raise SchemaError(f"{path}: not a {SCHEMA_FORMAT} file")
    if schema.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema version {schema.get('version')}")
    for key in ("features", "target", "interval_minutes", "stations"):
        if key not in schema:
            raise SchemaError(f"{path}: missing key {key!r}")
    if isinstance(schema["target"], str):
        schema["target"] = [schema["target"]]
    return schema


def write_dataset(dataset: StationDataset, data_path, schema_path) -> None:
    Path(schema_path).write_text(json.dumps(dataset.schema(), indent=2) + "\n")
    with open(data_path, "w", newline="") as fh:
        fh.write(DATA_HEADER + "\n")
        writer = csv.writer(fh)
        writer.writerow(["station_id", "timestamp", *dataset.feature_names])
        stamps = [str(t.astype("datetime64[m]")) for t in dataset.timestamps]
        for i, sid in enumerate(dataset.station_ids):
            vals = dataset.values[i]
            miss = dataset.missing[i]
            for j, stamp in enumerate(stamps):
                if miss[j].all():
                    continue
                row = ["" if miss[j, f] else repr(float(vals[j, f])) for f in range(dataset.n_features)]
                writer.writerow([sid, stamp, *row])


def load_dataset(data_path, schema_path) -> StationDataset:
    """Read a dataset file against its schema onto one global timestamp grid.

    Station-timestamps without a row are fully missing.
    """
    schema = _read_schema(schema_path)
    features = [f["name"] for f in schema["features"]]
    units = [f.get("unit", "") for f in schema["features"]]
    stations = schema["stations"]
    ids = [s["id"] for s in stations]
    index = {sid: i for i, sid in enumerate(ids)}
    interval = int(schema["interval_minutes"])
    if interval <= 0:
        raise SchemaError(f"{schema_path}: interval_minutes must be positive")

    rows: list[tuple[int, np.datetime64, list[float | None]]] = []
    with open(data_path, newline="") as fh:
        first = fh.readline().rstrip("\r\n")
        if first != DATA_HEADER:
            raise SchemaError(f"{data_path}:1: expected header {DATA_HEADER!r}, got {first!r}")
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{data_path}:2: missing column header") from None
        if header[:2] != ["station_id", "timestamp"] or header[2:] != features:
            raise SchemaError(f"{data_path}:2: columns {header} do not match schema features {features}")
        for lineno, rec in enumerate(reader, start=3):
            if not rec:
                continue
            if len(rec) != len(header):
                raise SchemaError(f"{data_path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            sid = rec[0]
            if sid not in index:
                raise SchemaError(f"{data_path}:{lineno}: station {sid!r} is not declared in the schema")
            try:
                stamp = np.datetime64(rec[1], "m")
                vals = [float(v) if v.strip() else None for v in rec[2:]]
            except ValueError as exc:
                raise SchemaError(f"{data_path}:{lineno}: unparseable row: {exc}") from None
            if any(v is not None and not math.isfinite(v) for v in vals):
                raise SchemaError(f"{data_path}:{lineno}: non-finite reading")
            rows.append((index[sid], stamp, vals))

    if "start" in schema and "end" in schema:
        start, end = np.datetime64(schema["start"], "m"), np.datetime64(schema["end"], "m")
    elif rows:
        stamps = [r[1] for r in rows]
        start, end = min(stamps), max(stamps)
    else:
        raise SchemaError(f"{data_path}: no rows and no grid bounds in the schema")
    grid = time_grid(start, end, interval)
    n, t, d = len(ids), len(grid), len(features)
    values = np.zeros((n, t, d))
    missing = np.ones((n, t, d), dtype=np.uint8)
    for i, stamp, vals in rows:
        offset = (stamp - start).astype(np.int64)
        if offset % interval or not 0 <= offset // interval < t:
            raise SchemaError(f"{data_path}: timestamp {stamp} is off the {interval}-minute grid starting {start}")
        j = int(offset // interval)
        for f, v in enumerate(vals):
            if v is not None:
                values[i, j, f] = v
                missing[i, j, f] = 0
    coords = np.array([[float(s["lat"]), float(s["lon"])] for s in stations]).reshape(n, 2)
    return StationDataset(ids, coords, features, units, list(schema["target"]), grid, interval, values, missing)


# windows and splits


@dataclass(frozen=True)
class SampleWindow:
    history: ReadingWindow  # x, m: [nodes, n_in, features]
    target: np.ndarray  # [nodes, n_out, d_out], standardized
    target_mask: np.ndarray  # [nodes, n_out, d_out], 1 = ground truth missing
    ts_his: np.ndarray
    ts_fur: np.ndarray


class WindowSet:
    """Sliding windows over a standardized dataset, materialized on demand."""

    def __init__(self, x_std: np.ndarray, missing: np.ndarray, timestamps: np.ndarray,
                 target_index: Sequence[int], starts: np.ndarray, n_in: int, n_out: int):
        self.x_std = x_std
        self.missing = missing
        self.timestamps = timestamps
        self.calendar = calendar_features(timestamps)
        self.target_index = list(target_index)
        self.starts = np.asarray(starts, dtype=np.int64)
        self.n_in = n_in
        self.n_out = n_out

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, i: int) -> SampleWindow:
        s = int(self.starts[i])
        his = slice(s, s + self.n_in)
        fur = slice(s + self.n_in, s + self.n_in + self.n_out)
        return SampleWindow(
            ReadingWindow(self.x_std[:, his], self.missing[:, his]),
            self.x_std[:, fur][..., self.target_index],
            self.missing[:, fur][..., self.target_index],
            self.timestamps[his],
            self.timestamps[fur],
        )

    def __iter__(self) -> Iterator[SampleWindow]:
        return (self[i] for i in range(len(self)))

    def arrays(self, indices) -> dict[str, np.ndarray]:
        """Stacked history/target arrays for a batch of window indices.

        Histories are ``[B, nodes, n_in, D]``; targets use the model layout
        ``[B, n_out, nodes, d_out]``.
        """
        starts = self.starts[np.asarray(indices, dtype=np.int64)]
        his = starts[:, None] + np.arange(self.n_in)
        fur = starts[:, None] + self.n_in + np.arange(self.n_out)
        x = np.moveaxis(self.x_std[:, his], 0, 1)
        m = np.moveaxis(self.missing[:, his], 0, 1)
        y = np.moveaxis(self.x_std[:, fur][..., self.target_index], 0, 2)
        ym = np.moveaxis(self.missing[:, fur][..., self.target_index], 0, 2)
        return {
            "x": x,
            "m": m,
            "y": y,
            "y_mask": ym,
            "cal_his": self.calendar[his],
            "cal_fur": self.calendar[fur],
            "last_target": self.timestamps[fur[:, -1]] if len(starts) else self.timestamps[:0],
        }

    @property
    def first_timestamp(self):
        return self.timestamps[self.starts.min()] if len(self) else None

    @property
    def last_timestamp(self):
        return self.timestamps[self.starts.max() + self.n_in + self.n_out - 1] if len(self) else None


def window_starts(lo: int, hi: int, n_in: int, n_out: int, stride: int) -> np.ndarray:
    """Start indices of windows lying entirely in ``[lo, hi)``."""
    if n_in < 1 or n_out < 1 or stride < 1:
        raise ContractError("n_in, n_out and stride must be >= 1")
    span = hi - lo
    if span < n_in + n_out:
        log.warning("range of %d steps is shorter than one window (%d); no windows", span, n_in + n_out)
        return np.zeros(0, dtype=np.int64)
    count = (span - n_in - n_out) // stride + 1
    return lo + stride * np.arange(count, dtype=np.int64)


def make_windows(dataset: StationDataset, n_in: int, n_out: int, stride: int = 1,
                 stats: StandardizationStats | None = None) -> WindowSet:
    """Sliding windows over the whole series.

    Without ``stats`` the statistics are fitted on the full series; use
    :func:`split` for leakage-free train/validation/test sets.
    """
    stats = stats or StandardizationStats.fit(dataset.values, dataset.missing)
    x_std = np.where(dataset.missing == 1, 0.0, standardize(dataset.values, stats))
    starts = window_starts(0, dataset.n_steps, n_in, n_out, stride)
    return WindowSet(x_std, dataset.missing, dataset.timestamps, dataset.target_index, starts, n_in, n_out)


@dataclass(frozen=True)
class SplitPlan:
    """Half-open ``[start, end)`` timestamp ranges for the three splits."""

    train: tuple[np.datetime64, np.datetime64]
    val: tuple[np.datetime64, np.datetime64]
    test: tuple[np.datetime64, np.datetime64]

    def __post_init__(self):
        ranges = [tuple(np.datetime64(v, "m") for v in r) for r in (self.train, self.val, self.test)]
        for lo, hi in ranges:
            if hi <= lo:
                raise ContractError(f"empty or reversed split range [{lo}, {hi})")
        for (_, a_hi), (b_lo, _) in zip(ranges, ranges[1:]):
            if b_lo < a_hi:
                raise ContractError("split ranges overlap or are not chronological")
        object.__setattr__(self, "train", ranges[0])
        object.__setattr__(self, "val", ranges[1])
        object.__setattr__(self, "test", ranges[2])

    @classmethod
    def by_fraction(cls, timestamps: np.ndarray, fractions=(0.6, 0.2, 0.2)) -> SplitPlan:
        ts = np.asarray(timestamps, dtype="datetime64[m]")
        t = len(ts)
        step = ts[1] - ts[0] if t > 1 else np.timedelta64(60, "m")
        cuts = np.round(np.cumsum(fractions) / np.sum(fractions) * t).astype(int)
        bounds = [0, *cuts[:-1].tolist(), t]
        edge = [ts[b] if b < t else ts[-1] + step for b in bounds]
        return cls((edge[0], edge[1]), (edge[1], edge[2]), (edge[2], edge[3]))

    @classmethod
    def by_year(cls, train: int, val: int, test: int) -> SplitPlan:
        y = lambda year: np.datetime64(f"{year}-01-01T00:00", "m")  # noqa: E731
        return cls((y(train), y(train + 1)), (y(val), y(val + 1)), (y(test), y(test + 1)))


@dataclass
class SplitData:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    stats: StandardizationStats
    target_stats: StandardizationStats = field(init=False)
    target_index: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.target_index = self.train.target_index
        self.target_stats = self.stats.select(self.target_index)


def _index_range(timestamps: np.ndarray, rng: tuple) -> tuple[int, int]:
    ts = timestamps.astype("datetime64[m]")
    return int(np.searchsorted(ts, rng[0], "left")), int(np.searchsorted(ts, rng[1], "left"))


def split(dataset: StationDataset, plan: SplitPlan, n_in: int, n_out: int,
          train_stride: int = 1, eval_stride: int | None = None) -> SplitData:
    """Chronological split; statistics come from the training range only."""
    eval_stride = eval_stride or n_out
    lo, hi = _index_range(dataset.timestamps, plan.train)
    stats = StandardizationStats.fit(dataset.values[:, lo:hi], dataset.missing[:, lo:hi])
    x_std = np.where(dataset.missing == 1, 0.0, standardize(dataset.values, stats))
    sets = []
    for rng, stride in ((plan.train, train_stride), (plan.val, eval_stride), (plan.test, eval_stride)):
        a, b = _index_range(dataset.timestamps, rng)
        starts = window_starts(a, b, n_in, n_out, stride)
        sets.append(WindowSet(x_std, dataset.missing, dataset.timestamps, dataset.target_index, starts, n_in, n_out))
    return SplitData(*sets, stats=stats)


# synthetic generator


@dataclass(frozen=True)
class SynthProcess:
    """Closed-form generator of station signals.

    The noiseless signal of feature ``f`` at a station with coordinates
    ``(lat, lon)`` and hour ``t`` is ``offset_f + scale_f * sum_c W[f, c] z_c``
    with latent components

    * ``z_0``: diurnal cycle, amplitude and phase smooth in space;
    * ``z_1``: weekly cycle;
    * ``z_2..``: slow regional waves with periods of 8-25 days whose phase
      shifts linearly with position, so nearby stations are correlated and
      upwind stations lead downwind ones.

    Every station parameter is a function of its coordinates only.
    """

    seed: int
    n_features: int
    slow_periods: np.ndarray
    slow_phase: np.ndarray
    slow_wavevec: np.ndarray
    slow_amp: np.ndarray
    diurnal_phase: float
    diurnal_grad: np.ndarray
    mixing: np.ndarray
    offsets: np.ndarray
    scales: np.ndarray

    CENTER = (39.9, 116.4)

    @classmethod
    def from_seed(cls, seed: int, n_features: int, n_slow: int = 3) -> SynthProcess:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        n_latent = 2 + n_slow
        mixing = np.abs(rng.normal(0.0, 0.25, size=(n_features, n_latent)))
        mixing[:, 0] = rng.uniform(0.9, 1.1, size=n_features)
        mixing[0, 1] = rng.uniform(0.3, 0.5)
        mixing[0, 2:] = rng.uniform(0.6, 0.9, size=n_slow)
        return cls(
            seed=seed,
            n_features=n_features,
            slow_periods=rng.uniform(200.0, 600.0, size=n_slow),
            slow_phase=rng.uniform(0, 2 * np.pi, size=n_slow),
            slow_wavevec=rng.normal(0.0, 4.0, size=(n_slow, 2)),
            slow_amp=rng.uniform(0.5, 0.8, size=n_slow),
            diurnal_phase=float(rng.uniform(0, 2 * np.pi)),
            diurnal_grad=rng.normal(0.0, 1.5, size=2),
            mixing=mixing,
            offsets=rng.uniform(20.0, 80.0, size=n_features),
            scales=rng.uniform(5.0, 20.0, size=n_features),
        )

    def latents(self, coords: np.ndarray, hours: np.ndarray) -> np.ndarray:
        """``[nodes, time, n_latent]`` latent components."""
        rel = np.asarray(coords, dtype=np.float64) - np.array(self.CENTER)
        t = np.asarray(hours, dtype=np.float64)[None, :]
        d_amp = 1.0 + 0.3 * np.tanh(rel @ np.array([2.0, -1.0]))[:, None]
        d_phase = self.diurnal_phase + (rel @ self.diurnal_grad)[:, None]
        comps = [d_amp * np.sin(2 * np.pi * t / 24.0 + d_phase),
                 np.broadcast_to(0.4 * np.sin(2 * np.pi * t / 168.0), (len(rel), t.shape[1]))]
        for j in range(len(self.slow_periods)):
            phase = self.slow_phase[j] + (rel @ self.slow_wavevec[j])[:, None]
            comps.append(self.slow_amp[j] * np.sin(2 * np.pi * t / self.slow_periods[j] + phase))
        return np.stack(comps, axis=-1)

    def signal(self, coords: np.ndarray, hours: np.ndarray) -> np.ndarray:
        """Noiseless readings ``[nodes, time, features]``."""
        z = self.latents(coords, hours)
        return self.offsets + self.scales * (z @ self.mixing.T)


def synth_generate(
    n_nodes: int,
    T: int,
    d_in: int,
    seed: int,
    start: str = "2015-01-01T00:00",
    interval_minutes: int = 60,
    noise: float = 0.1,
    organic_rate: float = 0.05,
) -> StationDataset:
    """Synthetic station dataset with a documented, forecastable generating process.

    Feature 0 (``pm25``) is the forecasting target.  Observations add
    Gaussian noise of ``noise * scale_f``; organic gaps are whole-row outages
    plus isolated points at a per-station rate around ``organic_rate``.
    """
    if n_nodes < 1 or T < 1 or d_in < 1:
        raise ContractError("n_nodes, T and d_in must be >= 1")
    process = SynthProcess.from_seed(seed, d_in)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    coords = np.column_stack([rng.uniform(39.6, 40.2, n_nodes), rng.uniform(116.0, 116.8, n_nodes)])
    hours = np.arange(T) * (interval_minutes / 60.0)
    clean = process.signal(coords, hours)
    values = clean + rng.normal(0.0, 1.0, size=clean.shape) * noise * process.scales
    station_rate = organic_rate * rng.uniform(0.5, 1.5, size=n_nodes)
    rows = rng.random((n_nodes, T, 1)) < (0.7 * station_rate)[:, None, None]
    points = rng.random((n_nodes, T, d_in)) < (0.3 * station_rate)[:, None, None]
    missing = (rows | points).astype(np.uint8)
    values = np.where(missing == 1, 0.0, values)
    names = ["pm25"] + [f"f{i}" for i in range(1, d_in)]
    timestamps = time_grid(start, np.datetime64(start, "m") + (T - 1) * np.timedelta64(interval_minutes, "m"),
                           interval_minutes)
    return StationDataset(
        station_ids=[f"S{i:02d}" for i in range(n_nodes)],
        coords=coords,
        feature_names=names,
        units=["ug/m3"] + ["unit"] * (d_in - 1),
        target=["pm25"],
        timestamps=timestamps,
        interval_minutes=interval_minutes,
        values=values,
        missing=missing,
    )
