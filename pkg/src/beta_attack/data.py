"""Sensor time series: CSV ingest, synthesis, normalization, windows, injection."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .artifacts import read_arrays, write_arrays
from .errors import (ConfigError, DegenerateSensorError, EmptySplitError, ParseError,
                     PolicyError)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class NormStats:
    minimum: np.ndarray
    maximum: np.ndarray
    clipped: bool = False

    @property
    def span(self) -> np.ndarray:
        return self.maximum - self.minimum


@dataclass(frozen=True)
class Segment:
    """One forecasting example: ``features`` hold steps t-w .. t-1, ``target`` step t."""

    features: np.ndarray        # (N, w)
    target_time: int
    labels_at_t: np.ndarray     # (N,) bool
    target: np.ndarray          # (N,) normalized values at t


@dataclass(frozen=True)
class TimeSeriesDataset:
    sensor_ids: tuple[str, ...]
    raw: np.ndarray                     # (T, N) sensor units
    labels: np.ndarray                  # (T, N) bool
    splits: dict[str, tuple[int, int]]  # half-open index ranges, ordered in time
    window: int = 100
    stride: int = 10
    normalized: np.ndarray | None = None
    stats: NormStats | None = None
    timestamps: tuple | None = None
    planted_parents: np.ndarray | None = None   # (N, N) weights, row i mixes its parents
    injection_log: tuple[dict, ...] = ()

    def __post_init__(self):
        T, N = self.raw.shape
        if len(self.sensor_ids) != N or self.labels.shape != (T, N):
            raise ConfigError("sensor ids / labels do not match raw data shape")
        if self.window <= 0 or self.stride <= 0:
            raise ConfigError("window and stride must be positive")
        prev = 0
        for name in SPLITS:
            lo, hi = self.splits[name]
            if lo != prev or hi < lo:
                raise ConfigError(f"splits must be contiguous and ordered, got {self.splits}")
            prev = hi
        if prev != T:
            raise ConfigError(f"splits cover {prev} of {T} steps")
        lo, hi = self.splits["train"]
        if self.labels[lo:hi].any():
            raise PolicyError("training split must not contain labelled anomalies")

    @property
    def n_sensors(self) -> int:
        return self.raw.shape[1]

    @property
    def n_steps(self) -> int:
        return self.raw.shape[0]

    def split_slice(self, split: str) -> slice:
        lo, hi = self.splits[split]
        return slice(lo, hi)

    def replace(self, **changes) -> "TimeSeriesDataset":
        return dataclasses.replace(self, **changes)

    def manifest(self) -> dict:
        """JSON-ready description (no bulk arrays)."""
        out = {
            "sensor_ids": list(self.sensor_ids),
            "n_steps": self.n_steps,
            "splits": {k: list(v) for k, v in self.splits.items()},
            "window": self.window,
            "stride": self.stride,
            "anomalous_steps": int(self.labels.sum()),
            "injection_log": list(self.injection_log),
        }
        if self.stats is not None:
            out["normalization"] = {
                "min": self.stats.minimum.tolist(),
                "max": self.stats.maximum.tolist(),
                "clipped": self.stats.clipped,
            }
        return out


def split_bounds(T: int, fractions: Sequence[float] = (0.7, 0.1, 0.2)) -> dict[str, tuple[int, int]]:
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError(f"split fractions must be three positives summing to 1, got {fractions}")
    a = int(round(T * fractions[0]))
    b = int(round(T * (fractions[0] + fractions[1])))
    return {"train": (0, a), "val": (a, b), "test": (b, T)}


# ----------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    timestamp_column: str = "timestamp"
    sensors: tuple[str, ...] | None = None   # default: every non-label, non-timestamp column
    forward_fill: bool = False
    window: int = 100
    stride: int = 10
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)


def _parse_time(text: str):
    try:
        return float(text)
    except ValueError:
        return datetime.fromisoformat(text)


def load_csv(path: str | Path, schema: CsvSchema = CsvSchema()) -> TimeSeriesDataset:
    """Read ``timestamp, sensor..., [label_<sensor>...]`` into a dataset.

    Rows must already be sorted by timestamp; ragged rows, non-numeric cells,
    duplicate or decreasing timestamps raise :class:`ParseError` naming the line.
    Empty sensor cells are forward-filled when ``schema.forward_fill`` is set
    and rejected otherwise.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if schema.timestamp_column not in header:
            raise ParseError(f"missing timestamp column {schema.timestamp_column!r}", line=1)
        ts_col = header.index(schema.timestamp_column)
        label_cols = {h[len("label_"):]: i for i, h in enumerate(header) if h.startswith("label_")}
        if schema.sensors is None:
            sensors = [h for i, h in enumerate(header) if i != ts_col and not h.startswith("label_")]
        else:
            sensors = list(schema.sensors)
            missing = [s for s in sensors if s not in header]
            if missing:
                raise ParseError(f"sensor columns not found: {missing}", line=1)
        unknown = sorted(set(label_cols) - set(sensors))
        if unknown:
            raise ParseError(f"label columns for unknown sensors: {unknown}", line=1)
        if not sensors:
            raise ParseError("no sensor columns", line=1)
        cols = [header.index(s) for s in sensors]

        times, rows, labels = [], [], []
        last = [math.nan] * len(sensors)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                t = _parse_time(row[ts_col].strip())
            except ValueError:
                raise ParseError("unparseable timestamp", line=lineno, column=schema.timestamp_column) from None
            if times:
                try:
                    if t == times[-1]:
                        raise ParseError("duplicate timestamp", line=lineno, column=schema.timestamp_column)
                    if t < times[-1]:
                        raise ParseError("timestamps not sorted", line=lineno, column=schema.timestamp_column)
                except TypeError:
                    raise ParseError("mixed timestamp formats", line=lineno, column=schema.timestamp_column) from None
            values = []
            for k, (name, c) in enumerate(zip(sensors, cols)):
                cell = row[c].strip()
                if cell == "":
                    if not schema.forward_fill or math.isnan(last[k]):
                        raise ParseError("missing value", line=lineno, column=name)
                    values.append(last[k])
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric cell {cell!r}", line=lineno, column=name) from None
                if not math.isfinite(v):
                    raise ParseError("non-finite value", line=lineno, column=name)
                values.append(v)
            last = values
            lab = []
            for name in sensors:
                if name in label_cols:
                    cell = row[label_cols[name]].strip().lower()
                    if cell not in ("0", "1", "true", "false", ""):
                        raise ParseError(f"bad label {cell!r}", line=lineno, column="label_" + name)
                    lab.append(cell in ("1", "true"))
                else:
                    lab.append(False)
            times.append(t)
            rows.append(values)
            labels.append(lab)
    if not rows:
        raise ParseError("no data rows", line=2)
    raw = np.asarray(rows, dtype=np.float64)
    return TimeSeriesDataset(
        sensor_ids=tuple(sensors),
        raw=raw,
        labels=np.asarray(labels, dtype=bool),
        splits=split_bounds(len(rows), schema.split_fractions),
        window=schema.window,
        stride=schema.stride,
        timestamps=tuple(times),
    )


# ----------------------------------------------------------------------------
# normalization


def min_max_normalize(dataset: TimeSeriesDataset, clip: bool = False) -> TimeSeriesDataset:
    """Scale every sensor by its training-split min and max.

    The same statistics are applied to validation and test data, which may
    therefore leave [0, 1] unless ``clip`` is set.
    """
    tr = dataset.raw[dataset.split_slice("train")]
    lo, hi = tr.min(axis=0), tr.max(axis=0)
    flat = [s for s, a, b in zip(dataset.sensor_ids, lo, hi) if not b > a]
    if flat:
        raise DegenerateSensorError(flat)
    stats = NormStats(lo, hi, clip)
    return dataset.replace(normalized=_apply_stats(dataset.raw, stats), stats=stats)


def _apply_stats(raw: np.ndarray, stats: NormStats) -> np.ndarray:
    out = (raw - stats.minimum) / stats.span
    return np.clip(out, 0.0, 1.0) if stats.clipped else out


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return values * stats.span + stats.minimum


# ----------------------------------------------------------------------------
# windows


def window_targets(n_steps: int, window: int, stride: int) -> list[int]:
    """Predicted-step indices t = w, w+stride, ... with t < n_steps."""
    if n_steps <= window:
        raise EmptySplitError(f"split of {n_steps} steps leaves no predicted step after a window of {window}")
    return list(range(window, n_steps, stride))


def sliding_windows(dataset: TimeSeriesDataset, split: str, stride: int | None = None) -> list[Segment]:
    """Segments whose history and predicted step both lie inside ``split``."""
    if dataset.normalized is None:
        raise ConfigError("dataset must be normalized before windowing")
    lo, hi = dataset.splits[split]
    stride = dataset.stride if stride is None else stride
    X = dataset.normalized
    out = []
    for t in window_targets(hi - lo, dataset.window, stride):
        a = lo + t
        out.append(Segment(
            features=X[a - dataset.window:a].T.copy(),
            target_time=a,
            labels_at_t=dataset.labels[a].copy(),
            target=X[a].copy(),
        ))
    return out


def stack_segments(segments: Sequence[Segment]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(features (S, N, w), targets (S, N), labels (S, N))."""
    return (np.stack([s.features for s in segments]),
            np.stack([s.target for s in segments]),
            np.stack([s.labels_at_t for s in segments]))


# ----------------------------------------------------------------------------
# synthesis and anomaly injection


def synthesize_network(n_sensors: int, n_steps: int, seed: int, coupling: float = 0.99, *,
                       window: int = 100, stride: int = 10,
                       split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
                       n_parents: tuple[int, int] = (2, 3), lag_window: int = 50, level: float = 50.0,
                       scale: float = 4.0, ar_coef: float = 0.99, sine_weight: float = 0.99,
                       noise: float = 0.05) -> TimeSeriesDataset:
    """Coupled sensor network with a planted acyclic dependency graph.

    Sensors are visited in a random order; each picks 2-3 parents among the
    sensors already visited (the first one is a pure source). Every sensor
    owns a sinusoid (distinct frequency) plus an AR(1) process, and its latent
    state mixes that signal with the recent mean of its parents' states::

        s_i(t) = (1-c) own_i(t) + c * sum_p a_ip * mean(s_p[t-L .. t-1])

    with parent weights ``a_ip`` summing to one per row. Observations are an
    affine map of the standardized state plus white measurement noise, in
    "sensor units" (``level``/``scale``, noise as a fraction of ``scale``).
    """
    if n_sensors < 4:
        raise ConfigError("need at least 4 sensors")
    if n_steps < 20 * window:
        raise ConfigError(f"need at least {20 * window} steps for window {window}")
    if not 0.0 <= coupling < 1.0:
        raise ConfigError("coupling must lie in [0, 1)")
    if lag_window < 1:
        raise ConfigError("lag_window must be positive")
    rng = np.random.default_rng(seed)
    N, T = n_sensors, n_steps

    order = rng.permutation(N)
    parents = np.zeros((N, N))
    lo_p, hi_p = n_parents
    for pos in range(1, N):
        i = order[pos]
        k = min(int(rng.integers(lo_p, hi_p + 1)), pos)
        choice = rng.choice(order[:pos], size=k, replace=False)
        w = rng.uniform(0.5, 1.5, size=k)
        parents[i, choice] = w / w.sum()
    source = parents.sum(axis=1) == 0

    # distinct frequencies on a jittered grid, periods roughly 40..400 steps
    grid = np.linspace(1 / 400, 1 / 40, N)
    freqs = rng.permutation(grid + rng.uniform(-0.15, 0.15, N) * (grid[1] - grid[0]))
    phases = rng.uniform(0, 2 * np.pi, N)
    t = np.arange(T)
    sines = np.sqrt(2) * np.sin(2 * np.pi * freqs[None, :] * t[:, None] + phases[None, :])
    shocks = rng.standard_normal((T, N)) * np.sqrt(1 - ar_coef ** 2)
    ar = np.zeros((T, N))
    ar[0] = rng.standard_normal(N)
    for k in range(1, T):
        ar[k] = ar_coef * ar[k - 1] + shocks[k]
    own = np.sqrt(sine_weight) * sines + np.sqrt(1 - sine_weight) * ar

    state = np.zeros((T, N))
    state[0] = own[0]
    csum = np.zeros((T + 1, N))   # running sums for the lagged means
    csum[1] = state[0]
    for k in range(1, T):
        lo = max(0, k - lag_window)
        recent = (csum[k] - csum[lo]) / (k - lo)
        state[k] = np.where(source, own[k], (1 - coupling) * own[k] + coupling * parents @ recent)
        csum[k + 1] = csum[k] + state[k]
    state = (state - state.mean(axis=0)) / state.std(axis=0)
    raw = level + scale * (state + noise * rng.standard_normal((T, N)))

    return TimeSeriesDataset(
        sensor_ids=tuple(f"s{i:02d}" for i in range(N)),
        raw=raw,
        labels=np.zeros((T, N), dtype=bool),
        splits=split_bounds(T, split_fractions),
        window=window,
        stride=stride,
        timestamps=tuple(range(T)),
        planted_parents=parents,
    )


def inject_anomalies(dataset: TimeSeriesDataset, zeta: float = 10.0, lambda_var: float = 7.0,
                     rate: float = 0.002, seed: int = 0, split: str = "test") -> TimeSeriesDataset:
    """Add Gaussian noise bursts to ``split`` in raw units and label them.

    A burst starts at each (sensor, step) with probability ``rate``; its
    length is Poisson(``lambda_var``), redrawn while zero, truncated at the
    split end. Each covered step gets independent N(0, zeta^2) noise.
    Existing normalization statistics are kept and re-applied.
    """
    if split == "train":
        raise PolicyError("anomalies may not be injected into the training split")
    if zeta < 0 or lambda_var <= 0 or not 0 <= rate <= 1:
        raise ConfigError("need zeta >= 0, lambda_var > 0 and 0 <= rate <= 1")
    rng = np.random.default_rng(seed)
    lo, hi = dataset.splits[split]
    raw = dataset.raw.copy()
    labels = dataset.labels.copy()
    log = list(dataset.injection_log)
    starts = rng.random((hi - lo, dataset.n_sensors)) < rate
    for step, sensor in zip(*np.nonzero(starts)):
        length = 0
        while length == 0:
            length = int(rng.poisson(lambda_var))
        a = lo + int(step)
        b = min(a + length, hi)
        raw[a:b, sensor] += rng.normal(0.0, zeta, size=b - a)
        labels[a:b, sensor] = True
        log.append({"sensor": int(sensor), "start": a, "length": b - a})
    normalized = None if dataset.stats is None else _apply_stats(raw, dataset.stats)
    return dataset.replace(raw=raw, labels=labels, normalized=normalized, injection_log=tuple(log))


# ----------------------------------------------------------------------------
# persistence


def _time_json(t):
    return t.isoformat() if isinstance(t, datetime) else t


def save_dataset(dataset: TimeSeriesDataset, path: str | Path, header: dict | None = None) -> None:
    """Arrays go to ``<path>.bin``; everything else to the ``<path>.json`` header."""
    arrays = {"raw": dataset.raw, "labels": dataset.labels}
    if dataset.normalized is not None:
        arrays["normalized"] = dataset.normalized
    if dataset.stats is not None:
        arrays["stats.min"] = dataset.stats.minimum
        arrays["stats.max"] = dataset.stats.maximum
    if dataset.planted_parents is not None:
        arrays["planted_parents"] = dataset.planted_parents
    meta = dataset.manifest()
    meta.pop("normalization", None)
    meta["clipped"] = None if dataset.stats is None else dataset.stats.clipped
    meta["timestamps"] = None if dataset.timestamps is None else [_time_json(t) for t in dataset.timestamps]
    write_arrays(path, arrays, {**(header or {}), "dataset": meta})


def load_dataset(path: str | Path) -> tuple[TimeSeriesDataset, dict]:
    arrays, header = read_arrays(path)
    meta = header["dataset"]
    stats = None
    if "stats.min" in arrays:
        stats = NormStats(arrays["stats.min"], arrays["stats.max"], bool(meta["clipped"]))
    ts = meta.get("timestamps")
    ds = TimeSeriesDataset(
        sensor_ids=tuple(meta["sensor_ids"]),
        raw=arrays["raw"],
        labels=arrays["labels"],
        splits={k: tuple(v) for k, v in meta["splits"].items()},
        window=meta["window"],
        stride=meta["stride"],
        normalized=arrays.get("normalized"),
        stats=stats,
        timestamps=None if ts is None else tuple(ts),
        planted_parents=arrays.get("planted_parents"),
        injection_log=tuple(meta["injection_log"]),
    )
    return ds, header
