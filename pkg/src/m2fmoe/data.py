"""CSV ingestion, normalization, windowing and mixture-based oversampling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (ConfigError, GmmError, IngestionError, LengthError, OrderingError,
                     ThresholdError)

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
VAR_FLOOR = 1e-6
MIN_WEIGHT = 1e-6
_MISSING = {"", "nan", "na", "null", "none"}


# ------------------------------------------------------------------ series


@dataclass
class RawSeries:
    timestamps: np.ndarray  # int64, strictly increasing
    values: np.ndarray  # (T, C)
    channels: Tuple[str, ...]
    filled: int = 0

    def __len__(self) -> int:
        return len(self.timestamps)


def _parse_time(text: str, line: int) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise IngestionError(f"line {line}: cannot parse timestamp {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def load_csv(path, interpolate: bool = True) -> RawSeries:
    """Read ``timestamp,<channel>...`` rows.

    Empty or NaN cells are filled by linear interpolation in time (constant
    at the ends) when ``interpolate`` is on; otherwise they are an error.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 2:
            raise IngestionError(f"{path}: header needs a timestamp and at least one value column")
        times, rows = [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            times.append(_parse_time(row[0], line))
            vals = []
            for cell in row[1:]:
                cell = cell.strip()
                if cell.lower() in _MISSING:
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise IngestionError(f"line {line}: cannot parse value {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    ts = np.asarray(times, dtype=np.int64)
    bad = np.nonzero(np.diff(ts) <= 0)[0]
    if len(bad):
        raise OrderingError(f"{path}: timestamps not strictly increasing at data row {bad[0] + 2}")
    values = np.asarray(rows, dtype=np.float64)
    missing = ~np.isfinite(values)
    filled = int(missing.sum())
    if filled:
        if not interpolate:
            r, c = np.argwhere(missing)[0]
            raise IngestionError(f"line {r + 2}: missing value in column {header[c + 1]!r}")
        for c in range(values.shape[1]):
            m = missing[:, c]
            if m.all():
                raise IngestionError(f"column {header[c + 1]!r} has no values")
            if m.any():
                values[m, c] = np.interp(ts[m], ts[~m], values[~m, c])
        log.info("filled %d missing values by interpolation", filled)
    return RawSeries(ts, values, tuple(header[1:]), filled)


def write_csv(path, series: RawSeries) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *series.channels])
        for t, row in zip(series.timestamps, series.values):
            w.writerow([int(t), *(repr(float(v)) for v in row)])


# ------------------------------------------------------------ normalization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def zscore_fit(values) -> NormStats:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    mean = v.mean(axis=0)
    std = v.std(axis=0)
    if (std < STD_FLOOR).any():
        log.warning("constant channel(s) %s: using std floor", np.nonzero(std < STD_FLOOR)[0].tolist())
    return NormStats(mean, np.maximum(std, STD_FLOOR))


def zscore_apply(x, stats: NormStats) -> np.ndarray:
    return stats.apply(x)


def zscore_invert(z, stats: NormStats) -> np.ndarray:
    return stats.invert(z)


# -------------------------------------------------------------------- GMM


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: List[float] = field(default_factory=list)

    def log_density(self, x) -> np.ndarray:
        """Per-point, per-component ``log(w_k N(x | mu_k, var_k))``."""
        x = np.asarray(x, dtype=np.float64)[:, None]
        return (np.log(self.weights) - 0.5 * np.log(2 * np.pi * self.variances)
                - 0.5 * (x - self.means) ** 2 / self.variances)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _kmeanspp(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, m):
        d2 = np.min((x[:, None] - np.asarray(centers)[None]) ** 2, axis=1)
        total = d2.sum()
        p = d2 / total if total > 0 else np.full(len(x), 1.0 / len(x))
        centers.append(x[rng.choice(len(x), p=p)])
    return np.asarray(centers, dtype=np.float64)


def gmm_fit(values, m: int = 3, max_iter: int = 200, tol: float = 1e-8, seed: int = 0) -> GmmModel:
    """Univariate Gaussian mixture by EM with k-means++ initialization."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if m < 1:
        raise ConfigError("need at least one mixture component")
    if not np.isfinite(x).all():
        raise GmmError("non-finite values passed to mixture fit")
    if len(np.unique(x)) < m:
        raise GmmError(f"need at least {m} distinct values, got {len(np.unique(x))}")
    rng = np.random.default_rng(seed)
    means = _kmeanspp(x, m, rng)
    nearest = np.argmin((x[:, None] - means) ** 2, axis=1)
    var0 = max(x.var(), VAR_FLOOR)
    variances = np.array([max(x[nearest == k].var(), VAR_FLOOR) if (nearest == k).sum() > 1 else var0
                          for k in range(m)])
    model = GmmModel(np.full(m, 1.0 / m), means, variances)
    reseeded = False
    prev = -np.inf
    for _ in range(max_iter):
        logp = model.log_density(x)
        norm = _logsumexp(logp)
        ll = float(norm.sum())
        model.log_likelihood.append(ll)
        if ll - prev < tol:
            break
        prev = ll
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        weights = nk / len(x)
        dead = weights < MIN_WEIGHT
        if dead.any():
            if reseeded:
                raise GmmError(f"mixture component(s) {np.nonzero(dead)[0].tolist()} collapsed")
            reseeded = True
            # put each dead component on the worst-explained point and restart the trace
            worst = np.argsort(norm)[: dead.sum()]
            model.means[dead] = x[worst]
            model.variances[dead] = var0
            model.weights = np.full(m, 1.0 / m)
            model.log_likelihood.clear()
            prev = -np.inf
            continue
        means = resp.T @ x / nk
        variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, VAR_FLOOR)
        model = GmmModel(weights / weights.sum(), means, variances, model.log_likelihood)
    return model


def extreme_thresholds(model: GmmModel) -> Tuple[float, float]:
    """Midpoints of the two lowest and the two highest component means."""
    mu = np.sort(np.asarray(model.means, dtype=np.float64))
    if len(mu) < 3:
        raise ConfigError("extreme thresholds need at least 3 components")
    lower = 0.5 * (mu[0] + mu[1])
    upper = 0.5 * (mu[-2] + mu[-1])
    if not lower < upper:
        raise ThresholdError(f"thresholds not ordered: lower={lower}, upper={upper}")
    return float(lower), float(upper)


# --------------------------------------------------------------- windowing


@dataclass(frozen=True)
class SeriesDataset:
    """Input/target windows cut from one normalized series."""

    inputs: np.ndarray  # (n, T_in, C)
    targets: np.ndarray  # (n, T_p, C)
    starts: np.ndarray  # (n,) start index of each input window
    oversampled: np.ndarray  # (n,) bool
    norm: Optional[NormStats] = None

    def __len__(self) -> int:
        return len(self.starts)

    def subset(self, idx) -> "SeriesDataset":
        idx = np.asarray(idx)
        return SeriesDataset(self.inputs[idx], self.targets[idx], self.starts[idx],
                             self.oversampled[idx], self.norm)

    def concat(self, other: "SeriesDataset") -> "SeriesDataset":
        return SeriesDataset(np.concatenate([self.inputs, other.inputs]),
                             np.concatenate([self.targets, other.targets]),
                             np.concatenate([self.starts, other.starts]),
                             np.concatenate([self.oversampled, other.oversampled]), self.norm)


def window_count(length: int, t_in: int, t_p: int, stride: int = 1) -> int:
    if length < t_in + t_p:
        return 0
    return (length - t_in - t_p) // stride + 1


def windows_at(values, starts, t_in: int, t_p: int, norm: Optional[NormStats] = None,
               oversampled: bool = False) -> SeriesDataset:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    starts = np.asarray(starts, dtype=np.int64).reshape(-1)
    if len(starts) and (starts.min() < 0 or starts.max() + t_in + t_p > len(v)):
        raise LengthError("window out of bounds")
    span = sliding_window_view(v, t_in + t_p, axis=0)  # n, C, L
    w = span[starts].transpose(0, 2, 1)
    return SeriesDataset(np.ascontiguousarray(w[:, :t_in]), np.ascontiguousarray(w[:, t_in:]),
                         starts, np.full(len(starts), oversampled), norm)


def make_windows(values, t_in: int, t_p: int, stride: int = 1,
                 norm: Optional[NormStats] = None) -> SeriesDataset:
    if t_in < 1 or t_p < 1 or stride < 1:
        raise ConfigError("window lengths and stride must be positive")
    n = window_count(len(values), t_in, t_p, stride)
    if n == 0:
        raise LengthError(f"series of length {len(values)} shorter than t_in + t_p = {t_in + t_p}")
    return windows_at(values, np.arange(n) * stride, t_in, t_p, norm)


def rolling_splits(values, t_in: int, t_p: int, norm: Optional[NormStats] = None) -> SeriesDataset:
    """Evaluation windows whose targets tile the span without overlap."""
    return make_windows(values, t_in, t_p, stride=t_p, norm=norm)


# ------------------------------------------------------------ oversampling


@dataclass
class OversampleReport:
    extreme_count: int
    windows_added: int
    cap_applied: bool

    def to_dict(self) -> dict:
        return {"extreme_count": self.extreme_count, "windows_added": self.windows_added,
                "cap_applied": self.cap_applied}


def oversample_starts(values, thresholds: Tuple[float, float], t_in: int, t_p: int,
                      original_count: int, cap_fraction: float = 0.2, step: int = 4,
                      n_windows: int = 18, seed: int = 0, channel: int = 0,
                      limit: Optional[int] = None) -> Tuple[np.ndarray, OversampleReport]:
    """Extra window starts placing each extreme point inside the forecast target.

    Candidates for an extreme at ``t`` start at ``t - t_in - j*step`` for
    ``j < n_windows``; those whose target misses ``t`` or that leave the
    series (or ``limit``, the end of the usable span) are dropped.  Repeated
    starts are merged, then the set is cut to ``floor(cap_fraction *
    original_count)`` by a seeded uniform draw.
    """
    if not 0 <= cap_fraction:
        raise ConfigError("cap fraction must be non-negative")
    if step < 1 or n_windows < 1:
        raise ConfigError("oversampling step and window count must be positive")
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        v = v[:, channel]
    lower, upper = thresholds
    end = len(v) if limit is None else min(limit, len(v))
    extremes = np.nonzero((v[:end] > upper) | (v[:end] < lower))[0]
    cands = set()
    for t in extremes:
        for j in range(n_windows):
            s = t - t_in - j * step
            if s < 0 or s + t_in + t_p > end:
                continue
            if s + t_in <= t < s + t_in + t_p:
                cands.add(int(s))
    starts = np.array(sorted(cands), dtype=np.int64)
    cap = int(math.floor(cap_fraction * original_count + 1e-9))
    capped = len(starts) > cap
    if capped:
        rng = np.random.default_rng(seed)
        starts = np.sort(rng.choice(starts, size=cap, replace=False))
    return starts, OversampleReport(int(len(extremes)), int(len(starts)), bool(capped))


def oversample(values, thresholds, t_in: int, t_p: int, original_count: int,
               cap_fraction: float = 0.2, step: int = 4, n_windows: int = 18, seed: int = 0,
               norm: Optional[NormStats] = None, source=None, limit: Optional[int] = None):
    """Oversampled windows as a dataset plus the report.

    Extremes are detected on ``source`` (raw levels) when given, windows are
    cut from ``values``.
    """
    det = values if source is None else source
    starts, report = oversample_starts(det, thresholds, t_in, t_p, original_count, cap_fraction,
                                       step, n_windows, seed, limit=limit)
    return windows_at(values, starts, t_in, t_p, norm, oversampled=True), report


# ---------------------------------------------------------------- splits


@dataclass
class DataSplits:
    train: SeriesDataset
    val: SeriesDataset
    test: SeriesDataset
    norm: NormStats
    thresholds: Optional[Tuple[float, float]]
    report: Optional[OversampleReport]
    split_index: int


def prepare_splits(values, t_in: int, t_p: int, test_fraction: float = 0.25, val_count: int = 60,
                   stride: int = 1, oversampling: bool = True, cap_fraction: float = 0.2,
                   gmm_components: int = 3, seed: int = 0) -> DataSplits:
    """Chronological train/test split with a random validation hold-out.

    Normalization and the mixture are fit on the training span only.  Test
    windows take their inputs from just before the split so the targets tile
    the test span.
    """
    raw = np.asarray(values, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    split = int(round(len(raw) * (1 - test_fraction)))
    if split < t_in + t_p + val_count or len(raw) - split < t_p:
        raise LengthError(f"series of length {len(raw)} too short for the requested split")
    norm = zscore_fit(raw[:split])
    z = norm.apply(raw)
    train_all = make_windows(z[:split], t_in, t_p, stride, norm)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(train_all))
    val = train_all.subset(np.sort(perm[:val_count]))
    train = train_all.subset(np.sort(perm[val_count:]))
    thresholds = report = None
    if oversampling:
        gmm = gmm_fit(raw[:split, 0], m=gmm_components, seed=seed)
        thresholds = extreme_thresholds(gmm)
        extra, report = oversample(z, thresholds, t_in, t_p, len(train), cap_fraction, seed=seed,
                                   norm=norm, source=raw[:, 0], limit=split)
        train = train.concat(extra)
    test = rolling_splits(z[split - t_in:], t_in, t_p, norm)
    test = SeriesDataset(test.inputs, test.targets, test.starts + split - t_in, test.oversampled, norm)
    return DataSplits(train, val, test, norm, thresholds, report, split)
