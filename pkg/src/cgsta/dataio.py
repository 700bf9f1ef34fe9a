"""Series ingestion, z-scoring, windowing, splitting and the synthetic benchmark."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ndgrad import EPS


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeries:
    values: np.ndarray                      # T x K
    variable_names: tuple[str, ...]
    labels: np.ndarray | None = None        # length T, {0,1}; evaluation only

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 2:
            raise DataError(f"series must be T x K with T >= 1, K >= 2; got {v.shape}")
        object.__setattr__(self, "values", v)
        if len(self.variable_names) != v.shape[1]:
            raise DataError("variable_names length must equal K")
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (v.shape[0],):
                raise DataError("labels must have length T")
            object.__setattr__(self, "labels", lab)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "TimeSeries":
        lab = None if self.labels is None else self.labels[start:stop]
        return TimeSeries(self.values[start:stop], self.variable_names, lab)


# ------------------------------------------------------------------------ CSV

def load_csv(path, has_header: bool = True, label_column: str | None = None,
             drop_columns=(), fill_missing: bool = False) -> TimeSeries:
    """Numeric CSV to a TimeSeries.

    ``drop_columns`` removes e.g. a timestamp column. With ``fill_missing``
    empty or NaN cells take the previous row's value (0 before the first
    observation); otherwise they are errors.
    """
    text = Path(path).read_text(encoding="utf-8")
    rows = [r for r in csv.reader(io.StringIO(text.replace("\r\n", "\n"))) if r]
    if has_header:
        if not rows:
            raise DataError(f"{path}: empty file")
        header, rows = [h.strip() for h in rows[0]], rows[1:]
    else:
        width = len(rows[0]) if rows else 0
        header = [f"x{i}" for i in range(width)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    label_idx = None
    if label_column is not None:
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not found")
        label_idx = header.index(label_column)
    drop = set()
    for name in drop_columns:
        if name not in header:
            raise DataError(f"{path}: column {name!r} to drop not found")
        drop.add(header.index(name))

    data = np.empty((len(rows), len(header)))
    first_line = 2 if has_header else 1
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r + first_line} has {len(row)} cells, expected {len(header)}")
        for c, cell in enumerate(row):
            if c in drop:
                continue
            if fill_missing and cell.strip().lower() in ("", "nan"):
                data[r, c] = data[r - 1, c] if r else 0.0
                continue
            try:
                val = float(cell)
            except ValueError:
                raise DataError(f"{path}: unparsable cell {cell!r} at row {r + first_line}, "
                                f"column {c + 1} ({header[c]})") from None
            if not np.isfinite(val):
                raise DataError(f"{path}: non-finite cell at row {r + first_line}, column {c + 1}")
            data[r, c] = val

    keep = [c for c in range(len(header)) if c != label_idx and c not in drop]
    labels = None
    if label_idx is not None:
        labels = data[:, label_idx]
        if not np.isin(labels, (0.0, 1.0)).all():
            raise DataError(f"{path}: label column must hold 0/1 values")
    return TimeSeries(data[:, keep], tuple(header[c] for c in keep), labels)


def load_labels(path, label_column: str = "label", has_header: bool = True) -> np.ndarray:
    """0/1 labels from a separate file (e.g. a label CSV beside the test data)."""
    rows = [r for r in csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8"))) if r]
    if has_header:
        if not rows:
            raise DataError(f"{path}: empty file")
        header, rows = [h.strip() for h in rows[0]], rows[1:]
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not found")
        idx = header.index(label_column)
    else:
        idx = len(rows[0]) - 1 if rows else 0
    try:
        labels = np.array([float(r[idx]) for r in rows])
    except (ValueError, IndexError):
        raise DataError(f"{path}: unreadable label cell") from None
    if labels.size == 0 or not np.isin(labels, (0.0, 1.0)).all():
        raise DataError(f"{path}: labels must be a non-empty 0/1 column")
    return labels.astype(np.int64)


def save_csv(path, series: TimeSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = list(series.variable_names)
        if series.labels is not None:
            header.append("label")
        w.writerow(header)
        for t in range(series.T):
            row = [repr(float(v)) for v in series.values[t]]
            if series.labels is not None:
                row.append(str(int(series.labels[t])))
            w.writerow(row)


# ---------------------------------------------------------------- normalizing

@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray     # population std, floored at EPS

    def apply(self, series: TimeSeries) -> TimeSeries:
        return apply_normalizer(self, series)

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def fit_normalizer(train: TimeSeries) -> Normalizer:
    mean = train.values.mean(axis=0)
    std = np.maximum(train.values.std(axis=0), EPS)
    return Normalizer(mean, std)


def apply_normalizer(n: Normalizer, series: TimeSeries) -> TimeSeries:
    if series.K != n.mean.shape[0]:
        raise DataError(f"normalizer fit on K={n.mean.shape[0]} but series has K={series.K}")
    return TimeSeries((series.values - n.mean) / n.std, series.variable_names, series.labels)


# ------------------------------------------------------------------ windowing

@dataclass
class WindowBatch:
    windows: np.ndarray              # N x K x L
    start_indices: np.ndarray
    is_augmented: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.is_augmented is None:
            self.is_augmented = np.zeros(len(self.start_indices), dtype=bool)

    def __len__(self) -> int:
        return self.windows.shape[0]

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.windows[idx], self.start_indices[idx], self.is_augmented[idx])


def window_starts(T: int, L: int, stride: int) -> np.ndarray:
    if L > T:
        raise DataError("series shorter than window")
    if stride < 1:
        raise DataError("stride must be >= 1")
    return np.arange(0, T - L + 1, stride)


def make_windows(series: TimeSeries | np.ndarray, L: int, stride: int) -> WindowBatch:
    values = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=np.float64)
    starts = window_starts(values.shape[0], L, stride)
    # (N, L, K) view -> (N, K, L) copy
    view = np.lib.stride_tricks.sliding_window_view(values, L, axis=0)[starts]
    return WindowBatch(np.ascontiguousarray(view), starts)


def split(series: TimeSeries, fractions: Sequence[float] = (0.6, 0.2, 0.2)):
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must be three numbers summing to 1")
    T = series.T
    b1 = int(np.floor(fractions[0] * T))
    b2 = int(np.floor((fractions[0] + fractions[1]) * T))
    if b1 < 1 or b2 - b1 < 1 or T - b2 < 1:
        raise DataError(f"split of T={T} leaves an empty part")
    return series.slice(0, b1), series.slice(b1, b2), series.slice(b2, T)


# ---------------------------------------------------------- synthetic corpus

@dataclass(frozen=True)
class SyntheticConfig:
    K: int = 12
    n_groups: int = 3
    T_train: int = 20000
    T_test: int = 4000
    anomaly_rate: float = 0.05
    seed: int = 0
    radius: float = 0.97
    base_period: float = 8.0
    noise_std: float = 0.15
    spike_magnitude: float = 6.0
    drift_magnitude: float = 3.0
    break_ar_coef: float = 0.0
    break_style: str = "noise"
    min_segment: int = 20
    max_segment: int = 60

    def validate(self) -> None:
        if self.K < 2 or self.n_groups < 1 or self.K % self.n_groups:
            raise DataError("K must be >= 2 and divisible by n_groups")
        if not 0.0 < self.anomaly_rate <= 0.2:
            raise DataError("anomaly_rate must lie in (0, 0.2]")
        if self.T_train < 2 or self.T_test < 2 * self.max_segment:
            raise DataError("T_train/T_test too short")
        if not 0.0 < self.radius < 1.0:
            raise DataError("radius must lie in (0, 1)")
        if not 0.0 <= self.break_ar_coef < 1.0:
            raise DataError("break_ar_coef must lie in [0, 1)")
        if self.break_style not in ("decouple", "noise"):
            raise DataError("break_style must be 'decouple' or 'noise'")


@dataclass(frozen=True)
class Segment:
    kind: str            # spike | break | drift
    start: int
    length: int
    variables: tuple[int, ...]


def _ar1(rng: np.random.Generator, n: int, phi: float) -> np.ndarray:
    """Unit-variance stationary AR(1) path."""
    innov = rng.standard_normal(n) * np.sqrt(1.0 - phi * phi)
    x = np.empty(n)
    x[0] = rng.standard_normal()
    for t in range(1, n):
        x[t] = phi * x[t - 1] + innov[t]
    return x


def _resonant(rng: np.random.Generator, n: int, period: float, radius: float,
              burn: int = 500) -> np.ndarray:
    """AR(2) with complex roots radius*exp(+-2*pi*i/period), scaled to unit variance."""
    a1 = 2.0 * radius * np.cos(2.0 * np.pi / period)
    a2 = -radius * radius
    eps = rng.standard_normal(n + burn)
    x = np.zeros(n + burn)
    for t in range(2, n + burn):
        x[t] = a1 * x[t - 1] + a2 * x[t - 2] + eps[t]
    x = x[burn:]
    return x / x.std()


def gen_synthetic_with_log(cfg: SyntheticConfig):
    """Generate (train, test, segments); the segment list is the planting log."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    K, G = cfg.K, cfg.n_groups
    group_of = np.repeat(np.arange(G), K // G)
    weights = rng.uniform(0.7, 1.3, K)
    T = cfg.T_train + cfg.T_test
    periods = cfg.base_period * (1.0 + 0.4 * np.arange(G))
    drivers = np.stack([_resonant(rng, T, periods[g], cfg.radius) for g in range(G)], axis=1)
    noise = rng.standard_normal((T, K)) * cfg.noise_std
    values = drivers[:, group_of] * weights + noise

    test = values[cfg.T_train:].copy()
    labels = np.zeros(cfg.T_test, dtype=np.int64)
    segments: list[Segment] = []
    target = int(round(cfg.anomaly_rate * cfg.T_test))
    kinds = ("spike", "break", "drift")
    marginal = np.sqrt(weights ** 2 + cfg.noise_std ** 2)
    gap = cfg.max_segment
    occupied = np.zeros(cfg.T_test, dtype=bool)
    occupied[:gap] = True          # keep a normal warm-up at the head
    n_tries = 0
    while labels.sum() < target and n_tries < 10000:
        n_tries += 1
        kind = kinds[len(segments) % 3]
        remaining = target - int(labels.sum())
        if kind == "spike":
            length = int(rng.integers(1, 4))
        else:
            length = int(rng.integers(cfg.min_segment, cfg.max_segment + 1))
        length = min(length, remaining)
        start = int(rng.integers(gap, cfg.T_test - length - 1))
        lo, hi = max(0, start - 5), min(cfg.T_test, start + length + 5)
        if occupied[lo:hi].any():
            continue
        occupied[lo:hi] = True
        sl = slice(start, start + length)
        if kind == "spike":
            n_var = int(rng.integers(1, 4))
            vars_ = tuple(sorted(rng.choice(K, n_var, replace=False).tolist()))
            for k in vars_:
                sign = rng.choice((-1.0, 1.0))
                test[sl, k] += sign * cfg.spike_magnitude * marginal[k]
        elif kind == "break":
            k = int(rng.integers(K))
            vars_ = (k,)
            if cfg.break_style == "decouple":
                # same rhythm, own phase: normal in isolation, wrong w.r.t. the group
                rogue = _resonant(rng, length, periods[group_of[k]], cfg.radius)
            else:
                rogue = _ar1(rng, length, cfg.break_ar_coef)
            test[sl, k] = (weights[k] * rogue
                           + rng.standard_normal(length) * cfg.noise_std)
        else:
            g = int(rng.integers(G))
            vars_ = tuple(np.flatnonzero(group_of == g).tolist())
            sign = rng.choice((-1.0, 1.0))
            for k in vars_:
                test[sl, k] += sign * cfg.drift_magnitude * marginal[k]
        labels[sl] = 1
        segments.append(Segment(kind, start, length, vars_))

    names = tuple(f"x{k}" for k in range(K))
    train = TimeSeries(values[:cfg.T_train], names)
    test_series = TimeSeries(test, names, labels)
    segments.sort(key=lambda s: s.start)
    return train, test_series, segments


def gen_synthetic(cfg: SyntheticConfig | dict):
    if isinstance(cfg, dict):
        cfg = SyntheticConfig(**cfg)
    train, test, _ = gen_synthetic_with_log(cfg)
    return train, test
