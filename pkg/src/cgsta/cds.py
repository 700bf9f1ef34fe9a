"""Cross-scale contrastive terms: intra-scale, inter-scale and fusion-level."""

from __future__ import annotations

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

SCALES = ("local", "regional", "global")


def pool_scale(h: Tensor) -> Tensor:
    """Average over variables and time steps: N x K x L x H -> N x H."""
    return h.mean(axis=(1, 2))


def _sim_matrix(a: Tensor, b: Tensor) -> Tensor:
    return nd.l2_normalize(a, axis=-1) @ nd.swap_last(nd.l2_normalize(b, axis=-1))


def _one_direction(s_same: Tensor, s_cross: Tensor, tau: float) -> Tensor:
    N = s_same.shape[0]
    off_diag = 1.0 - np.eye(N)
    e_same = nd.exp(s_same * (1.0 / tau)) * off_diag
    num = e_same.sum(axis=1)
    den = num + nd.exp(s_cross * (1.0 / tau)).sum(axis=1)
    return -(nd.log(num) - nd.log(den)).mean()


def intra_scale_loss(z_pos: Tensor, z_neg: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE with the multi-positive numerator sum_{k != i}.

    Positives are the other normal views in the batch, negatives every
    pseudo-anomalous view; the mirrored term swaps the roles.
    """
    if z_pos.shape[0] < 2:
        raise ValueError("intra-scale loss needs batch >= 2")
    if z_pos.shape != z_neg.shape:
        raise nd.ShapeError("pos/neg embeddings must share a shape")
    s_pp = _sim_matrix(z_pos, z_pos)
    s_nn = _sim_matrix(z_neg, z_neg)
    s_pn = _sim_matrix(z_pos, z_neg)
    l_pos = _one_direction(s_pp, s_pn, tau)
    l_neg = _one_direction(s_nn, nd.swap_last(s_pn), tau)
    return (l_pos + l_neg) * 0.5


def inter_scale_loss(z: dict) -> Tensor:
    """z[scale][view] -> mean over views of -(1/3N) sum of pairwise scale cosines."""
    views = []
    for view in ("pos", "neg"):
        loc, reg, glb = (z[s][view] for s in SCALES)
        total = nd.cosine_sim(loc, reg) + nd.cosine_sim(loc, glb) + nd.cosine_sim(reg, glb)
        views.append(-(total.sum() * (1.0 / (3 * loc.shape[0]))))
    return (views[0] + views[1]) * 0.5


def fuse(h_local: Tensor, h_regional: Tensor, h_global: Tensor):
    if not (h_local.shape == h_regional.shape == h_global.shape):
        raise nd.ShapeError("scale embeddings must share a shape to be fused")
    h_concat = nd.concat([h_local, h_regional, h_global], axis=-1)
    return h_concat, pool_scale(h_concat)


def fusion_loss(z_fusion_pos: Tensor, z_fusion_neg: Tensor, tau: float) -> Tensor:
    return intra_scale_loss(z_fusion_pos, z_fusion_neg, tau)


def cds_total(parts: dict) -> Tensor:
    """Unweighted sum of intra (x3), inter and fusion terms."""
    keys = ("intra_local", "intra_regional", "intra_global", "inter", "fusion")
    total = nd.as_tensor(0.0)
    for k in keys:
        if k in parts:
            total = total + parts[k]
    return total


def cds_terms(h_pos: dict, h_neg: dict, tau: float) -> dict:
    """Every CDS term for one batch, keyed as in the training log."""
    z = {s: {"pos": pool_scale(h_pos[s]), "neg": pool_scale(h_neg[s])} for s in SCALES}
    parts = {f"intra_{s}": intra_scale_loss(z[s]["pos"], z[s]["neg"], tau) for s in SCALES}
    parts["inter"] = inter_scale_loss(z)
    zf_pos = nd.concat([z[s]["pos"] for s in SCALES], axis=-1)
    zf_neg = nd.concat([z[s]["neg"] for s in SCALES], axis=-1)
    parts["fusion"] = fusion_loss(zf_pos, zf_neg, tau)
    return parts
