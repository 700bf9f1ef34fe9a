import math

import numpy as np
import pytest

from cgsta.ndgrad import Tensor
from cgsta.saa import (BankEmptyError, StableGraphBank, consistency_loss, ema_update,
                       graph_contrast_loss, graph_project, saa_total)

from oracles import contrast_naive


def test_ema_hand_arithmetic():
    bank = StableGraphBank(0.9, {"local": np.full((3, 3), 0.5)})
    ema_update(bank, {"local": np.full((3, 3), 0.7)})
    np.testing.assert_allclose(bank.A_stable["local"], 0.52, rtol=0, atol=1e-15)


def test_first_update_copies_and_gamma_zero_tracks():
    bank = StableGraphBank(0.0)
    a, b = np.eye(2), np.ones((2, 2))
    ema_update(bank, {"local": a})
    assert np.array_equal(bank.A_stable["local"], a)
    ema_update(bank, {"local": b})
    assert np.array_equal(bank.A_stable["local"], b)


def test_geometric_convergence():
    target = np.random.default_rng(0).random((3, 3))
    bank = StableGraphBank(0.8, {"local": np.zeros((3, 3))})
    errs = []
    for _ in range(6):
        ema_update(bank, {"local": target})
        errs.append(np.abs(bank.A_stable["local"] - target).max())
    np.testing.assert_allclose(np.array(errs[1:]) / errs[:-1], 0.8, rtol=1e-9)


def test_ema_of_stochastic_rows_stays_stochastic():
    rng = np.random.default_rng(1)
    bank = StableGraphBank(0.85)
    for _ in range(20):
        A = rng.random((4, 4))
        ema_update(bank, {"local": A / A.sum(axis=1, keepdims=True)})
    assert np.abs(bank.A_stable["local"].sum(axis=1) - 1).max() < 1e-6


def test_ema_shape_mismatch_and_bad_gamma():
    bank = StableGraphBank(0.5, {"local": np.eye(2)})
    with pytest.raises(ValueError):
        ema_update(bank, {"local": np.eye(3)})
    with pytest.raises(ValueError):
        StableGraphBank(1.0)


def test_consistency_limits():
    h = {s: Tensor(np.random.default_rng(i).standard_normal((2, 3, 4, 2)))
         for i, s in enumerate(("local", "regional", "global"))}
    assert consistency_loss(h, h).item() == pytest.approx(-3.0, abs=1e-12)
    a = np.zeros((1, 2)); a[0, 0] = 1
    b = np.zeros((1, 2)); b[0, 1] = 1
    assert consistency_loss({"local": Tensor(a)}, {"local": Tensor(b)}).item() == 0.0
    with pytest.raises(BankEmptyError, match="stable bank empty"):
        consistency_loss(h, {})


def test_projection_at_origin_and_determinism():
    P = {"saa.proj.local.W": Tensor(np.random.default_rng(0).standard_normal((9, 4))),
         "saa.proj.local.b": Tensor(np.zeros(4))}
    assert np.array_equal(graph_project(np.zeros((3, 3)), P, "local").data, np.zeros((1, 4)))
    A = np.random.default_rng(1).random((3, 3))
    assert np.array_equal(graph_project(A, P, "local").data, graph_project(A.copy(), P, "local").data)


def test_contrast_closed_form():
    got = graph_contrast_loss(Tensor([[1.0, 0.0]]), Tensor([1.0, 0.0]), Tensor([[0.0, 1.0]]), 1.0)
    assert got.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert got.item() == pytest.approx(0.313262, abs=1e-6)


@pytest.mark.parametrize("seed", range(25))
def test_contrast_matches_loop(seed):
    rng = np.random.default_rng(seed)
    N, M, d = (int(v) for v in rng.integers(1, 5, 3))
    g, st, aug = rng.standard_normal((N, d + 1)), rng.standard_normal(d + 1), rng.standard_normal((M, d + 1))
    tau = float(rng.uniform(0.1, 2.0))
    got = graph_contrast_loss(Tensor(g), Tensor(st), Tensor(aug), tau).item()
    assert got == pytest.approx(contrast_naive(g.tolist(), st.tolist(), aug.tolist(), tau), abs=1e-9)


def test_contrast_needs_negatives():
    with pytest.raises(ValueError):
        graph_contrast_loss(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.ones((0, 2))), 1.0)


def test_saa_total():
    assert saa_total(-3.0, 0.0).item() == -3.0
