"""Causal temporal encoder, fused Gaussian density head, NLL and series scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
LOGVAR_BOUNDS = (-8.0, 8.0)
DILATIONS = (1, 2, 4)


def temporal_encode(windows: Tensor, P: dict) -> Tensor:
    """Per-variable causal dilated conv stack (kernel 3), zero left-padding.

    Output at step t only sees inputs at steps <= t. Relu between layers,
    none after the last.
    """
    N, K, L = windows.shape
    x = windows.reshape(N, K, L, 1)
    for li, d in enumerate(DILATIONS):
        C = x.shape[-1]
        pad = nd.concat([Tensor(np.zeros((N, K, 2 * d, C))), x], axis=2)
        # tap m reads x[t - m*d] = pad[2d - m*d + t]
        taps = [pad[:, :, 2 * d - m * d: 2 * d - m * d + L, :] for m in range(3)]
        x = nd.concat(taps, axis=-1) @ P[f"density.conv{li}.W"] + P[f"density.conv{li}.b"]
        if li < len(DILATIONS) - 1:
            x = nd.relu(x)
    return x


def fuse_and_head(h_concat: Tensor, t_feat: Tensor, P: dict):
    """Gaussian parameters (mu, logvar), each N x L x K.

    Entry t is predicted from the features at step t-1. Entry 0 has no
    predecessor; it is filled with mu=0, logvar=0 and never scored.
    """
    N, K, L, _ = h_concat.shape
    feat = nd.concat([h_concat, t_feat], axis=-1)[:, :, : L - 1, :]
    hidden = nd.relu(feat @ P["density.Wf"] + P["density.bf"])
    mu = (hidden @ P["density.Wmu"] + P["density.bmu"]).reshape(N, K, L - 1)
    lv = nd.clip((hidden @ P["density.Wlv"] + P["density.blv"]).reshape(N, K, L - 1),
                 *LOGVAR_BOUNDS)
    head = Tensor(np.zeros((N, K, 1)))
    mu = nd.concat([head, mu], axis=2)
    lv = nd.concat([head, lv], axis=2)
    return nd.transpose(mu, (0, 2, 1)), nd.transpose(lv, (0, 2, 1))


def nll(x, mu: Tensor, logvar: Tensor, first_scored: int = 1):
    """Gaussian NLL. x is N x K x L (window layout), mu/logvar N x L x K.

    Returns (L_det scalar tensor, per_step N x L ndarray with NaN on
    unscored steps).
    """
    x = nd.as_tensor(x)
    if x.ndim == 3 and x.shape != mu.shape:
        x = nd.transpose(x, (0, 2, 1))
    if x.shape != mu.shape or mu.shape != logvar.shape:
        raise nd.ShapeError(f"nll: shapes {x.shape}, {mu.shape}, {logvar.shape}")
    xs, ms, ls = (t[:, first_scored:, :] for t in (x, mu, logvar))
    diff = xs - ms
    terms = (ls + diff * diff * nd.exp(-ls) + LOG_2PI) * 0.5
    per = terms.mean(axis=2)
    per_step = np.full(mu.shape[:2], np.nan)
    per_step[:, first_scored:] = per.data
    return per.mean(), per_step


@dataclass
class ScoreSeries:
    scores: np.ndarray       # length T, NaN where unscored
    coverage: np.ndarray     # length T, windows contributing to each step

    @property
    def scored(self) -> np.ndarray:
        return self.coverage > 0


def scoring_starts(T: int, L: int, stride: int) -> np.ndarray:
    """Window starts for scoring.

    The stride is capped at L-1 because the first step of each window has
    no predictive score; a tail window is added so the last step is covered.
    """
    if T < L:
        raise ValueError("series shorter than window")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    step = min(stride, L - 1)
    starts = list(range(0, T - L + 1, step))
    if starts[-1] != T - L:
        starts.append(T - L)
    return np.asarray(starts)


def aggregate_scores(T: int, starts, per_step: np.ndarray) -> ScoreSeries:
    """Overlap mean of per-window step scores, accumulated in start order."""
    L = per_step.shape[1]
    total = np.zeros(T)
    coverage = np.zeros(T, dtype=np.int64)
    order = np.argsort(np.asarray(starts), kind="stable")
    for i in order:
        s = int(starts[i])
        row = per_step[i]
        ok = ~np.isnan(row)
        total[s:s + L][ok] += row[ok]
        coverage[s:s + L][ok] += 1
    scores = np.full(T, np.nan)
    hit = coverage > 0
    scores[hit] = total[hit] / coverage[hit]
    return ScoreSeries(scores, coverage)
