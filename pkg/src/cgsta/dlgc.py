"""Layered dynamic graphs (local / regional / global) and their GCN encoders.

The local graph is per-window scaled dot-product attention over learned
window descriptors. Regional and global graphs come from hard argmax
clustering of variable embeddings; a soft-assignment mixture with weight
``lambda_soft`` keeps the clustering parameters trainable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

SCALES = ("local", "regional", "global")


@dataclass
class LayeredGraphs:
    A_local: Tensor          # N x K x K, row-stochastic
    A_regional: np.ndarray   # K x K binary (identical for every window)
    A_global: np.ndarray     # K x K binary
    phi: np.ndarray          # K region ids
    psi: np.ndarray          # R global ids, -1 for empty regions
    S_soft: Tensor | None    # K x R
    A_eff: dict              # scale -> adjacency actually fed to the GCN

    def per_window(self, name: str, n: int) -> np.ndarray:
        """Broadcast a shared K x K matrix to N x K x K."""
        A = self.A_regional if name == "regional" else self.A_global
        return np.broadcast_to(A, (n,) + A.shape)


def local_adjacency(windows: Tensor, P: dict) -> Tensor:
    """Row-softmax of q_i . k_j / sqrt(d_a) over per-variable descriptors."""
    u = windows @ P["dlgc.U"] + P["dlgc.bU"]            # N x K x d_u
    q = u @ P["dlgc.Wq"]
    k = u @ P["dlgc.Wk"]
    d_a = P["dlgc.Wq"].shape[1]
    logits = (q @ nd.swap_last(k)) * (1.0 / np.sqrt(d_a))
    return nd.softmax(logits, axis=-1)


def assign_regions(E: Tensor, C_regional: Tensor, tau_assign: float):
    if tau_assign <= 0:
        raise ValueError("tau_assign must be positive")
    logits = E @ nd.swap_last(C_regional)
    S_soft = nd.softmax(logits * (1.0 / tau_assign), axis=-1)
    phi = np.argmax(logits.data, axis=1)   # argmax returns the first (smallest) index on ties
    return S_soft, phi


def regional_adjacency(phi) -> np.ndarray:
    phi = np.asarray(phi)
    return (phi[:, None] == phi[None, :]).astype(np.float64)


def global_adjacency(E, phi, C_global):
    """Coarsen regions to global clusters; empty regions get psi = -1."""
    E = E.data if isinstance(E, Tensor) else np.asarray(E)
    C = C_global.data if isinstance(C_global, Tensor) else np.asarray(C_global)
    phi = np.asarray(phi)
    R = int(phi.max()) + 1 if phi.size else 0
    psi = np.full(R, -1, dtype=np.int64)
    for r in range(R):
        members = phi == r
        if members.any():
            e_reg = E[members].mean(axis=0)
            psi[r] = int(np.argmax(C @ e_reg))
    lab = psi[phi]
    return psi, (lab[:, None] == lab[None, :]).astype(np.float64)


def _soft_global(E: Tensor, S_soft: Tensor, C_global: Tensor, tau_assign: float) -> Tensor:
    """Soft variable-to-global memberships Q = S * softmax(E_reg_soft C_global^T / tau)."""
    mass = S_soft.sum(axis=0, keepdims=True)                       # 1 x R
    weighted = nd.swap_last(S_soft) @ E                            # R x d_e
    E_reg = weighted / nd.expand(nd.swap_last(mass), weighted.shape)
    P = nd.softmax((E_reg @ nd.swap_last(C_global)) * (1.0 / tau_assign), axis=-1)
    return S_soft @ P                                              # K x G


def mix_adjacency(A_hard: np.ndarray, S: Tensor | None, lambda_soft: float) -> Tensor:
    """(1 - lambda) A_hard + lambda S S^T; exactly A_hard when lambda is 0."""
    if lambda_soft == 0.0 or S is None:
        return Tensor(A_hard)
    return Tensor(A_hard) * (1.0 - lambda_soft) + (S @ nd.swap_last(S)) * lambda_soft


def normalize_adjacency(A: Tensor) -> Tensor:
    """D^-1 (A + I): self-loops then row normalisation (used for the clustered scales)."""
    K = A.shape[-1]
    A1 = A + np.eye(K)
    return A1 / nd.expand(A1.sum(axis=-1, keepdims=True), A1.shape)


def lift(windows: Tensor, P: dict) -> Tensor:
    N, K, L = windows.shape
    return windows.reshape(N, K, L, 1) @ P["dlgc.V"] + P["dlgc.bV"]


def _propagate(A_hat: Tensor, X: Tensor) -> Tensor:
    N, K, L, F = X.shape
    return (A_hat @ X.reshape(N, K, L * F)).reshape(N, K, L, F)


def gcn_encode(windows: Tensor, A, P: dict, scale: str, normalize: bool | None = None,
               lifted: Tensor | None = None) -> Tensor:
    """Two-layer GCN shared over time steps: A_hat relu(A_hat X W1) W2.

    ``A`` is K x K or N x K x K. Clustered scales get self-loops and row
    normalisation; the local attention graph is already row-stochastic.
    """
    A = nd.as_tensor(A)
    if normalize is None:
        normalize = scale != "local"
    A_hat = normalize_adjacency(A) if normalize else A
    X = lifted if lifted is not None else lift(windows, P)
    h1 = nd.relu(_propagate(A_hat, X) @ P[f"gcn.{scale}.W1"])
    return _propagate(A_hat, h1) @ P[f"gcn.{scale}.W2"]


def build_graphs(windows: Tensor, P: dict, tau_assign: float, lambda_soft: float,
                 scales=SCALES, shared: dict | None = None) -> LayeredGraphs:
    """All adjacencies for one batch.

    ``shared`` carries the window-independent clustered graphs from an
    earlier call on the same parameters so they are built once per step.
    """
    A_local = local_adjacency(windows, P)
    if shared is not None:
        return LayeredGraphs(A_local, shared["A_regional"], shared["A_global"], shared["phi"],
                             shared["psi"], shared["S_soft"],
                             {"local": A_local, **{s: shared["A_eff"][s] for s in shared["A_eff"]}})
    K = windows.shape[1]
    if "regional" not in scales:
        phi = np.zeros(K, dtype=np.int64)
        ones = np.ones((K, K))
        return LayeredGraphs(A_local, ones, ones, phi, np.zeros(1, dtype=np.int64), None,
                             {"local": A_local})
    S_soft, phi = assign_regions(P["dlgc.E"], P["dlgc.C_regional"], tau_assign)
    A_reg = regional_adjacency(phi)
    psi, A_glb = global_adjacency(P["dlgc.E"], phi, P["dlgc.C_global"])
    A_eff = {"local": A_local, "regional": mix_adjacency(A_reg, S_soft, lambda_soft)}
    if lambda_soft == 0.0:
        A_eff["global"] = Tensor(A_glb)
    else:
        Q = _soft_global(P["dlgc.E"], S_soft, P["dlgc.C_global"], tau_assign)
        A_eff["global"] = mix_adjacency(A_glb, Q, lambda_soft)
    return LayeredGraphs(A_local, A_reg, A_glb, phi, psi, S_soft, A_eff)


def shared_graphs(g: LayeredGraphs) -> dict:
    return {"A_regional": g.A_regional, "A_global": g.A_global, "phi": g.phi, "psi": g.psi,
            "S_soft": g.S_soft, "A_eff": {s: a for s, a in g.A_eff.items() if s != "local"}}


def encode_scales(windows: Tensor, P: dict, tau_assign: float = 0.5, lambda_soft: float = 0.1,
                  scales=SCALES, shared: dict | None = None):
    """Graphs plus per-scale embeddings h[scale] of shape N x K x L x H."""
    graphs = build_graphs(windows, P, tau_assign, lambda_soft, scales, shared)
    X = lift(windows, P)
    h = {s: gcn_encode(windows, graphs.A_eff[s], P, s, lifted=X) for s in scales}
    return graphs, h
