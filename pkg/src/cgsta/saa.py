"""Stable graph bank (EMA adjacencies) and the dynamic/stable alignment losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

SCALES = ("local", "regional", "global")


class BankEmptyError(RuntimeError):
    pass


@dataclass
class StableGraphBank:
    gamma: float
    A_stable: dict = field(default_factory=dict)   # scale -> K x K ndarray

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    @property
    def initialized(self) -> bool:
        return bool(self.A_stable)

    def snapshot(self) -> dict:
        return {s: a.copy() for s, a in self.A_stable.items()}


def ema_update(bank: StableGraphBank, batch_mean_dyn: dict, gamma: float | None = None) -> StableGraphBank:
    """stable <- gamma * stable + (1 - gamma) * dyn; the first call copies dyn."""
    gamma = bank.gamma if gamma is None else gamma
    for s, dyn in batch_mean_dyn.items():
        dyn = np.asarray(dyn, dtype=np.float64)
        prev = bank.A_stable.get(s)
        if prev is None:
            bank.A_stable[s] = dyn.copy()
            continue
        if prev.shape != dyn.shape:
            raise ValueError(f"ema_update: shape mismatch for {s}: {prev.shape} vs {dyn.shape}")
        bank.A_stable[s] = gamma * prev + (1.0 - gamma) * dyn
    return bank


def consistency_loss(H_dyn: dict, H_stable: dict) -> Tensor:
    """-(1/N) sum_i sum_scale cos(flat h_dyn_i, flat h_stable_i); stable side detached."""
    if not H_stable:
        raise BankEmptyError("stable bank empty; run one step first")
    total = nd.as_tensor(0.0)
    for s, hd in H_dyn.items():
        N = hd.shape[0]
        hs = H_stable[s].detach()
        cos = nd.cosine_sim(hd.reshape(N, -1), hs.reshape(N, -1))
        total = total + cos.sum() * (-1.0 / N)
    return total


def graph_project(A, P: dict, scale: str) -> Tensor:
    """tanh(vec(A) W + b): K x K (or N x K x K) adjacency -> d_g code(s)."""
    A = nd.as_tensor(A)
    K = A.shape[-1]
    flat = A.reshape(-1, K * K)
    return nd.tanh(flat @ P[f"saa.proj.{scale}.W"] + P[f"saa.proj.{scale}.b"])


def graph_contrast_loss(g_dyn: Tensor, g_stable: Tensor, g_dyn_aug: Tensor, tau: float) -> Tensor:
    """Graph-level InfoNCE against the shared stable code.

    loss_i = -log(e^{s_i/tau} / (e^{s_i/tau} + sum_j e^{s'_j/tau})), averaged
    over the N normal codes; s'_j are the M pseudo-anomalous codes' similarities.
    """
    if g_dyn_aug.shape[0] < 1:
        raise ValueError("graph contrast needs at least one pseudo-anomalous code")
    if g_dyn.shape[0] < 1:
        raise ValueError("graph contrast needs at least one normal code")
    anchor = g_stable.detach().reshape(1, -1)
    N, M = g_dyn.shape[0], g_dyn_aug.shape[0]
    s_pos = nd.cosine_sim(g_dyn, nd.expand(anchor, (N, anchor.shape[1]))) * (1.0 / tau)
    s_neg = nd.cosine_sim(g_dyn_aug, nd.expand(anchor, (M, anchor.shape[1]))) * (1.0 / tau)
    neg_mass = nd.exp(s_neg).sum()
    e_pos = nd.exp(s_pos)
    den = e_pos + nd.expand(neg_mass.reshape(1), (N,))
    return (nd.log(den) - s_pos).mean()


def saa_total(l_consist, l_contrast) -> Tensor:
    return nd.as_tensor(l_consist) + nd.as_tensor(l_contrast)
