"""Pseudo-anomalous negative views built from normal windows.

Three perturbations are available, all label-free: point injection,
context replacement (segment swap inside one variable) and cluster drift
(shared offset on one variable group). Every function takes an explicit
``numpy.random.Generator`` and never mutates its input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndgrad import EPS

STRATEGIES = ("point", "context", "drift")


@dataclass(frozen=True)
class AugmentConfig:
    point_magnitude: float = 3.0
    point_fraction: float = 0.02
    replace_len_fraction: float = 0.25
    drift_magnitude: float = 1.5
    strategy_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        for name in ("point_fraction", "replace_len_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.point_magnitude <= 0 or self.drift_magnitude <= 0:
            raise ValueError("magnitudes must be positive")
        w = np.asarray(self.strategy_weights, dtype=float)
        if w.shape != (3,) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("strategy_weights must be 3 non-negative floats summing to 1")


def _row_std(window: np.ndarray) -> np.ndarray:
    return np.maximum(window.std(axis=1), EPS)


def point_inject(window: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig,
                 std: np.ndarray | None = None) -> np.ndarray:
    """Offset a random subset of cells by +-point_magnitude * std of their variable.

    ``std`` defaults to the per-window row std (floored at EPS).
    """
    K, L = window.shape
    std = _row_std(window) if std is None else np.asarray(std, dtype=float)
    n = max(1, int(round(cfg.point_fraction * K * L)))
    cells = rng.choice(K * L, size=n, replace=False)
    signs = rng.choice((-1.0, 1.0), size=n)
    out = window.copy()
    rows, cols = np.divmod(cells, L)
    out[rows, cols] += signs * cfg.point_magnitude * std[rows]
    return out


def replace_length(L: int, cfg: AugmentConfig) -> int:
    return int(round(cfg.replace_len_fraction * L))


def context_replace(window: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Swap two disjoint equal-length segments inside one random variable.

    If the swap leaves the window unchanged (flat rows), a few more draws are
    tried before falling back to a single point injection.
    """
    K, L = window.shape
    if L < 4:
        raise ValueError("context replacement needs L >= 4")
    seg = replace_length(L, cfg)
    if not 1 <= seg <= L // 2:
        raise ValueError(f"replace length {seg} outside [1, {L // 2}]")
    for _ in range(8):
        k = int(rng.integers(K))
        a = int(rng.integers(0, L - seg + 1))
        # source offsets that do not overlap [a, a + seg)
        candidates = [b for b in range(0, L - seg + 1) if b + seg <= a or b >= a + seg]
        b = int(candidates[int(rng.integers(len(candidates)))])
        out = window.copy()
        out[k, a:a + seg] = window[k, b:b + seg]
        out[k, b:b + seg] = window[k, a:a + seg]
        if not np.array_equal(out, window):
            return out
    single = AugmentConfig(point_fraction=1e-9, point_magnitude=cfg.point_magnitude)
    return point_inject(window, rng, single)


def contiguous_groups(K: int, n_groups: int) -> np.ndarray:
    """Equal contiguous split of K variables, used before learned regions exist."""
    n_groups = max(1, min(n_groups, K))
    return np.minimum(np.arange(K) * n_groups // K, n_groups - 1)


def cluster_drift(window: np.ndarray, groups, rng: np.random.Generator,
                  cfg: AugmentConfig) -> np.ndarray:
    """Shift every variable of one random group over the trailing half."""
    K, L = window.shape
    groups = np.asarray(groups)
    if groups.shape != (K,):
        raise ValueError("groups must assign every variable")
    ids = np.unique(groups)
    g = ids[int(rng.integers(len(ids)))]
    sign = rng.choice((-1.0, 1.0))
    members = np.flatnonzero(groups == g)
    std = _row_std(window)
    out = window.copy()
    half = L // 2
    out[members, L - half:] += sign * cfg.drift_magnitude * std[members, None]
    return out


def make_pseudo_anomaly(window: np.ndarray, groups, rng: np.random.Generator,
                        cfg: AugmentConfig) -> tuple[np.ndarray, str]:
    choice = int(rng.choice(3, p=np.asarray(cfg.strategy_weights, dtype=float)))
    tag = STRATEGIES[choice]
    if tag == "point":
        return point_inject(window, rng, cfg), tag
    if tag == "context":
        return context_replace(window, rng, cfg), tag
    return cluster_drift(window, groups, rng, cfg), tag


def augment_batch(windows: np.ndarray, groups, rng: np.random.Generator,
                  cfg: AugmentConfig) -> tuple[np.ndarray, list[str]]:
    """One pseudo-anomalous view per window, in batch order."""
    out = np.empty_like(windows)
    tags = []
    for i, w in enumerate(windows):
        out[i], tag = make_pseudo_anomaly(w, groups, rng, cfg)
        tags.append(tag)
    return out, tags
