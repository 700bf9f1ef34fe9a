"""Composite objective, Adam loop with post-step EMA, checkpoints."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .augment import AugmentConfig, augment_batch, contiguous_groups
from .cds import cds_total, cds_terms
from .density import nll
from .dataio import Normalizer, TimeSeries, apply_normalizer, fit_normalizer, make_windows
from .dlgc import SCALES, build_graphs, encode_scales, gcn_encode, lift, shared_graphs
from .model import CGSTAModel, ModelConfig, detection_forward, init_params, window_scores
from .ndgrad import Tape, Tensor
from .saa import (StableGraphBank, consistency_loss, ema_update, graph_contrast_loss,
                  graph_project, saa_total)

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_saa", "no_cds", "no_dlgc")
MAGIC = b"CGSTA1"


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; carries the step index and last terms."""

    def __init__(self, message: str, step: int, last_terms: dict | None = None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.last_terms = last_terms or {}


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.85
    beta: float = 0.35
    gamma: float = 0.85
    tau: float = 0.1
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    variant: str = "full"
    stride: int = 10
    patience: int = 3
    clip_norm: float = 5.0
    val_fraction: float = 0.2
    max_steps: int = 0                 # 0 = no cap
    max_batches_per_epoch: int = 0     # 0 = all batches
    point_magnitude: float = 3.0
    point_fraction: float = 0.02
    replace_len_fraction: float = 0.25
    drift_magnitude: float = 1.5

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1 or self.stride < 1:
            raise ValueError("epochs and stride must be >= 1")

    @property
    def uses_cds(self) -> bool:
        return self.variant in ("full", "no_saa") and self.alpha > 0

    @property
    def uses_saa(self) -> bool:
        return self.variant in ("full", "no_cds") and self.beta > 0

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.point_magnitude, self.point_fraction,
                             self.replace_len_fraction, self.drift_magnitude)


# ------------------------------------------------------------------ objective

@dataclass
class StepContext:
    dyn_mean: dict = field(default_factory=dict)      # scale -> K x K batch-mean adjacency
    stable_nodes: list = field(default_factory=list)  # node ids on the stable branch
    graphs: object = None


def total_loss(windows_pos: np.ndarray, windows_neg: np.ndarray | None, P: dict,
               bank: StableGraphBank | None, cfg: TrainConfig, mcfg: ModelConfig,
               stable_params: dict | None = None):
    """L_det + alpha * L_CDS + beta * L_SAA with terms gated by the variant.

    The stable branch is evaluated with ``stable_params`` (default ``P``) and
    detached either way; passing frozen values lets a finite-difference
    check see the same stop-gradient objective that backward() differentiates.

    Returns (loss tensor, per-term float record, StepContext).
    """
    P_st = P if stable_params is None else stable_params
    x_pos = Tensor(windows_pos)
    graphs, h_pos, mu, lv = detection_forward(x_pos, P, mcfg)
    l_det, _ = nll(x_pos, mu, lv)
    ctx = StepContext(graphs=graphs)
    ctx.dyn_mean = {s: graphs.A_eff[s].data.mean(axis=0) if graphs.A_eff[s].ndim == 3
                    else graphs.A_eff[s].data.copy() for s in mcfg.scales}
    record = {"L_det": float(l_det.data)}
    zero = nd.as_tensor(0.0)
    l_cds, l_saa = zero, zero

    need_neg = cfg.variant != "no_dlgc" and (cfg.uses_cds or cfg.uses_saa)
    if need_neg:
        if windows_neg is None:
            raise ValueError("pseudo-anomalous views required for this variant")
        x_neg = Tensor(windows_neg)
        shared = shared_graphs(graphs)
        if cfg.uses_cds:
            g_neg, h_neg = encode_scales(x_neg, P, mcfg.tau_assign, mcfg.lambda_soft,
                                         SCALES, shared)
        else:
            g_neg = build_graphs(x_neg, P, mcfg.tau_assign, mcfg.lambda_soft, SCALES, shared)

    if cfg.uses_cds:
        parts = cds_terms(h_pos, h_neg, cfg.tau)
        l_cds = cds_total(parts)
        record.update({f"L_{k}": float(v.data) for k, v in parts.items()})

    if cfg.uses_saa and bank is not None and bank.initialized:
        X = lift(x_pos, P_st)
        h_stable = {}
        for s in SCALES:
            A_st = Tensor(bank.A_stable[s])
            hs = gcn_encode(x_pos, A_st, P_st, s, lifted=X)
            ctx.stable_nodes.extend([A_st.node_id, hs.node_id])
            h_stable[s] = hs.detach()
        l_consist = consistency_loss({s: h_pos[s] for s in SCALES}, h_stable)
        l_contrast = zero
        N = windows_pos.shape[0]
        for s in SCALES:
            g_st = graph_project(bank.A_stable[s], P_st, s)
            ctx.stable_nodes.append(g_st.node_id)
            g_dyn = graph_project(graphs.A_eff[s], P, s)
            g_aug = graph_project(g_neg.A_eff[s], P, s)
            if g_dyn.shape[0] == 1:
                g_dyn = nd.expand(g_dyn, (N, g_dyn.shape[1]))
            if g_aug.shape[0] == 1:
                g_aug = nd.expand(g_aug, (N, g_aug.shape[1]))
            l_contrast = l_contrast + graph_contrast_loss(g_dyn, g_st, g_aug, cfg.tau)
        l_saa = saa_total(l_consist, l_contrast)
        record["L_consist"] = float(l_consist.data)
        record["L_contrast"] = float(l_contrast.data)

    loss = l_det
    if cfg.uses_cds:
        loss = loss + l_cds * cfg.alpha
    if cfg.uses_saa:
        loss = loss + l_saa * cfg.beta
    record["L_cds"] = float(l_cds.data)
    record["L_saa"] = float(l_saa.data)
    record["L_total"] = float(loss.data)
    return loss, record, ctx


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_by_global_norm(grads: dict, clip_norm: float) -> dict:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, clip_norm: float = 5.0,
              step_index: int | None = None) -> dict:
    """Bias-corrected Adam after global-norm clipping. Returns new params."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}", step_index if step_index is not None
                                else state.t + 1)
    grads = clip_by_global_norm(grads, clip_norm)
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = p
            continue
        m = beta1 * state.m.get(k, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1.0 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


# ---------------------------------------------------------------------- train

@dataclass
class TrainResult:
    model: CGSTAModel
    bank: StableGraphBank
    history: list
    cds_log: list
    augment_log: list
    events: list
    stable_grad_violations: int = 0
    best_epoch: int = 0


HISTORY_COLUMNS = ("step", "epoch", "L_det", "L_cds", "L_saa", "L_total")
CDS_COLUMNS = ("step", "L_intra_local", "L_intra_regional", "L_intra_global", "L_inter", "L_fusion")


def _val_loss(model: CGSTAModel, windows: np.ndarray) -> float:
    per = window_scores(model, windows)
    return float(np.nanmean(per))


def train(cfg: TrainConfig, mcfg: ModelConfig, data: TimeSeries, val: TimeSeries | None = None,
          audit_stable: bool = False) -> TrainResult:
    """Fit the detector on normal data (labels, if present, are ignored)."""
    cfg.validate()
    mcfg.validate()
    if data.K != mcfg.K:
        raise ValueError(f"model expects K={mcfg.K}, data has K={data.K}")
    if val is None:
        cut = int(np.floor((1.0 - cfg.val_fraction) * data.T))
        data, val = data.slice(0, cut), data.slice(cut, data.T)
    data = TimeSeries(data.values, data.variable_names)         # drop labels
    normalizer = fit_normalizer(data)
    train_w = make_windows(apply_normalizer(normalizer, data), mcfg.L, cfg.stride).windows
    val_w = None
    if val is not None and val.T >= mcfg.L:
        val_w = make_windows(apply_normalizer(normalizer, val), mcfg.L, cfg.stride).windows

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng, shuffle_rng, aug_rng = (np.random.default_rng(s) for s in seeds)
    params = init_params(mcfg, init_rng)
    model = CGSTAModel(mcfg, params, normalizer)
    bank = StableGraphBank(cfg.gamma)
    model.bank = bank
    state = AdamState()
    aug_cfg = cfg.augment_config()
    history, cds_log, aug_log, events = [], [], [], []
    violations = 0
    step = 0
    best = (np.inf, model.params, bank.snapshot(), 0)
    bad_epochs = 0
    n = train_w.shape[0]
    B = cfg.batch_size

    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        batches = [perm[i:i + B] for i in range(0, n, B) if len(perm[i:i + B]) >= 2]
        if cfg.max_batches_per_epoch:
            batches = batches[:cfg.max_batches_per_epoch]
        for idx in batches:
            if cfg.max_steps and step >= cfg.max_steps:
                break
            step += 1
            xb = train_w[np.sort(idx)]
            neg = None
            if cfg.variant != "no_dlgc" and (cfg.uses_cds or cfg.uses_saa):
                groups = contiguous_groups(mcfg.K, mcfg.G) if epoch == 0 else current_regions(model)
                neg, tags = augment_batch(xb, groups, aug_rng, aug_cfg)
                aug_log.extend((step, i, t) for i, t in enumerate(tags))
            with Tape() as tape:
                P = model.tensors()
                loss, rec, ctx = total_loss(xb, neg, P, bank, cfg, mcfg)
            if not np.isfinite(rec["L_total"]):
                raise TrainingError("non-finite loss", step, rec)
            grads = nd.backward(loss, tape)
            if audit_stable:
                for nid in ctx.stable_nodes:
                    g = grads.get(nid)
                    if g is not None and np.any(g != 0):
                        violations += 1
            g_named = {k: grads.get(t.node_id, np.zeros(t.shape)) for k, t in P.items()}
            model.params = adam_step(model.params, g_named, state, cfg.lr,
                                     clip_norm=cfg.clip_norm, step_index=step)
            events.append(("adam", step))
            if cfg.uses_saa:
                ema_update(bank, ctx.dyn_mean)
                events.append(("ema", step))
            history.append({"step": step, "epoch": epoch, **{k: rec[k] for k in HISTORY_COLUMNS[2:]}})
            if cfg.uses_cds:
                cds_log.append({"step": step, **{c: rec[c] for c in CDS_COLUMNS[1:]}})
        if val_w is not None:
            vl = _val_loss(model, val_w)
            log.info("epoch %d val L_det %.5f", epoch, vl)
            if vl < best[0]:
                best = (vl, model.params, bank.snapshot(), epoch)
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break
        if cfg.max_steps and step >= cfg.max_steps:
            break

    if val_w is not None and np.isfinite(best[0]):
        model.params = best[1]
        bank.A_stable = best[2]
    return TrainResult(model, bank, history, cds_log, aug_log, events, violations,
                       best[3])


def current_regions(model: CGSTAModel) -> np.ndarray:
    E = model.params["dlgc.E"]
    C = model.params["dlgc.C_regional"]
    return np.argmax(E @ C.T, axis=1)


# ------------------------------------------------------------------ persisting

def _flatten_config(cfg: dict) -> str:
    parts = []
    for k, v in cfg.items():
        if isinstance(v, float):
            v = repr(v)
        text = str(v)
        if any(c.isspace() for c in text) or "=" in text:
            raise CheckpointError(f"config value for {k} cannot be serialised: {text!r}")
        parts.append(f"{k}={text}")
    return " ".join(parts)


def save_checkpoint(path, model: CGSTAModel, bank: StableGraphBank | None,
                    cfg: TrainConfig) -> None:
    tensors: list[tuple[str, np.ndarray]] = [(f"param.{k}", v) for k, v in model.params.items()]
    if model.normalizer is not None:
        tensors += [("normalizer.mean", model.normalizer.mean), ("normalizer.std", model.normalizer.std)]
    if bank is not None:
        tensors += [(f"bank.{s}", bank.A_stable[s]) for s in SCALES if s in bank.A_stable]
    conf = {f"model.{k}": v for k, v in asdict(model.cfg).items()}
    conf.update({f"train.{k}": v for k, v in asdict(cfg).items()})
    lines = [MAGIC.decode()]
    for name, arr in tensors:
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
    lines.append("config " + _flatten_config(conf))
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    Path(path).write_bytes(header + payload)


def _parse_value(text: str, kind):
    if kind is bool:
        return text == "True"
    return kind(text)


def load_checkpoint(path):
    """Returns (model, bank, train_config)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC + b"\n"):
        raise CheckpointError("bad magic: not a checkpoint file")
    end = raw.find(b"\n\n")
    if end < 0:
        raise CheckpointError("truncated header")
    header = raw[:end].decode("ascii").split("\n")[1:]
    payload = raw[end + 2:]
    entries, conf = [], {}
    for line in header:
        if line.startswith("config "):
            for item in line[len("config "):].split(" "):
                if item:
                    k, _, v = item.partition("=")
                    conf[k] = v
            continue
        bits = line.split(" ")
        ndim = int(bits[1])
        shape = tuple(int(b) for b in bits[2:2 + ndim])
        entries.append((bits[0], shape))
    need = sum(int(np.prod(s)) for _, s in entries) * 8
    if len(payload) != need:
        raise CheckpointError(f"payload length {len(payload)} does not match manifest ({need} bytes)")
    arrays, off = {}, 0
    for name, shape in entries:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += count * 8

    mkw = {f.name: _parse_value(conf[f"model.{f.name}"], type(f.default))
           for f in fields(ModelConfig) if f"model.{f.name}" in conf}
    tkw = {f.name: _parse_value(conf[f"train.{f.name}"], type(f.default))
           for f in fields(TrainConfig) if f"train.{f.name}" in conf}
    mcfg, tcfg = ModelConfig(**mkw), TrainConfig(**tkw)
    params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    normalizer = None
    if "normalizer.mean" in arrays:
        normalizer = Normalizer(arrays["normalizer.mean"], arrays["normalizer.std"])
    bank = StableGraphBank(tcfg.gamma, {k[len("bank."):]: v for k, v in arrays.items()
                                        if k.startswith("bank.")})
    model = CGSTAModel(mcfg, params, normalizer, bank)
    return model, bank, tcfg
