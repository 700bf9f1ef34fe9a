"""Parameter set, forward passes and scoring for the full detector."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ndgrad as nd
from .dataio import Normalizer, TimeSeries, make_windows
from .density import (DILATIONS, LOG_2PI, ScoreSeries, aggregate_scores, fuse_and_head, nll,
                      scoring_starts, temporal_encode)
from .dlgc import SCALES, encode_scales
from .ndgrad import Tensor
from .saa import StableGraphBank


@dataclass
class ModelConfig:
    K: int = 12
    L: int = 60
    d_e: int = 16
    d_u: int = 32
    d_a: int = 16
    F_in: int = 8
    H: int = 32
    R: int = 8
    G: int = 3
    H_t: int = 32
    H_f: int = 32
    d_g: int = 64
    tau_assign: float = 0.5
    lambda_soft: float = 0.1
    single_scale: bool = False

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if not self.G < self.R < self.K:
            raise ValueError("need G < R < K")
        if self.L < 4:
            raise ValueError("window length must be >= 4")
        if self.tau_assign <= 0:
            raise ValueError("tau_assign must be positive")
        if not 0.0 <= self.lambda_soft <= 1.0:
            raise ValueError("lambda_soft must lie in [0, 1]")

    @property
    def scales(self) -> tuple[str, ...]:
        return ("local",) if self.single_scale else SCALES


EMB_SCALE = 0.1


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape or (fan_in, fan_out))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Named parameter arrays, drawn in a fixed order from ``rng``."""
    cfg.validate()
    p: dict[str, np.ndarray] = {}
    # small scale keeps the soft assignments away from one-hot saturation
    p["dlgc.E"] = rng.standard_normal((cfg.K, cfg.d_e)) * EMB_SCALE
    p["dlgc.C_regional"] = rng.standard_normal((cfg.R, cfg.d_e)) * EMB_SCALE
    p["dlgc.C_global"] = rng.standard_normal((cfg.G, cfg.d_e)) * EMB_SCALE
    p["dlgc.U"] = _glorot(rng, cfg.L, cfg.d_u)
    p["dlgc.bU"] = np.zeros(cfg.d_u)
    p["dlgc.Wq"] = _glorot(rng, cfg.d_u, cfg.d_a)
    p["dlgc.Wk"] = _glorot(rng, cfg.d_u, cfg.d_a)
    p["dlgc.V"] = _glorot(rng, 1, cfg.F_in)
    p["dlgc.bV"] = rng.uniform(-0.1, 0.1, cfg.F_in)
    for s in SCALES:
        p[f"gcn.{s}.W1"] = _glorot(rng, cfg.F_in, cfg.H)
        p[f"gcn.{s}.W2"] = _glorot(rng, cfg.H, cfg.H)
    for s in SCALES:
        p[f"saa.proj.{s}.W"] = _glorot(rng, cfg.K * cfg.K, cfg.d_g)
        p[f"saa.proj.{s}.b"] = np.zeros(cfg.d_g)
    c_in = 1
    for li, _ in enumerate(DILATIONS):
        p[f"density.conv{li}.W"] = _glorot(rng, 3 * c_in, cfg.H_t)
        p[f"density.conv{li}.b"] = np.zeros(cfg.H_t)
        c_in = cfg.H_t
    width = cfg.H * len(cfg.scales) + cfg.H_t
    p["density.Wf"] = _glorot(rng, width, cfg.H_f)
    p["density.bf"] = np.zeros(cfg.H_f)
    p["density.Wmu"] = _glorot(rng, cfg.H_f, 1)
    p["density.bmu"] = np.zeros(1)
    p["density.Wlv"] = _glorot(rng, cfg.H_f, 1) * 0.1
    p["density.blv"] = np.zeros(1)
    return p


class CGSTAModel:
    """Parameters plus the state needed to score new data."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray],
                 normalizer: Normalizer | None = None, bank: StableGraphBank | None = None):
        self.cfg = cfg
        self.params = params
        self.normalizer = normalizer
        self.bank = bank

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "CGSTAModel":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def config_dict(self) -> dict:
        return asdict(self.cfg)


def detection_forward(windows: Tensor, P: dict, cfg: ModelConfig, shared=None):
    """Positive-view pass: graphs, scale embeddings, Gaussian parameters."""
    graphs, h = encode_scales(windows, P, cfg.tau_assign, cfg.lambda_soft, cfg.scales, shared)
    h_concat = h["local"] if cfg.single_scale else nd.concat([h[s] for s in SCALES], axis=-1)
    mu, lv = fuse_and_head(h_concat, temporal_encode(windows, P), P)
    return graphs, h, mu, lv


def window_scores(model: CGSTAModel, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Per-step NLL for each window (N x L, NaN at step 0), no tape recorded."""
    out = []
    with nd.no_grad():
        P = model.tensors(requires_grad=False)
        for i in range(0, len(windows), batch_size):
            x = Tensor(windows[i:i + batch_size])
            _, _, mu, lv = detection_forward(x, P, model.cfg)
            out.append(nll(x, mu, lv)[1])
    return np.concatenate(out, axis=0)


def window_terms(model: CGSTAModel, windows: np.ndarray) -> tuple[np.ndarray, dict]:
    """Per-variable NLL terms (N x L x K, NaN at step 0) and the window graphs."""
    with nd.no_grad():
        P = model.tensors(requires_grad=False)
        x = Tensor(windows)
        graphs, _, mu, lv = detection_forward(x, P, model.cfg)
    xs = np.transpose(windows, (0, 2, 1))
    terms = 0.5 * (lv.data + (xs - mu.data) ** 2 * np.exp(-lv.data) + LOG_2PI)
    terms[:, 0, :] = np.nan
    return terms, graphs


def score_series(model: CGSTAModel, series: TimeSeries, stride_test: int = 1,
                 batch_size: int = 256) -> ScoreSeries:
    """Overlap-averaged per-step scores; ``series`` must already be normalised."""
    L = model.cfg.L
    if series.T < L:
        raise ValueError("series shorter than window")
    starts = scoring_starts(series.T, L, stride_test)
    wb = make_windows(series, L, 1)
    per_step = window_scores(model, wb.windows[starts], batch_size)
    return aggregate_scores(series.T, starts, per_step)
