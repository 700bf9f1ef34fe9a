import math

import numpy as np
import pytest

from cgsta import ndgrad as nd
from cgsta.cds import (_one_direction, _sim_matrix, cds_terms, cds_total, fuse, fusion_loss, inter_scale_loss, intra_scale_loss,
                       pool_scale)
from cgsta.ndgrad import Tensor

from oracles import intra_naive

CLOSED_FORM = math.log(1 + 2 * math.exp(-1))


def orthogonal_views():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    return Tensor(np.stack([e1, e1])), Tensor(np.stack([e2, e2]))


def test_intra_closed_form():
    pos, neg = orthogonal_views()
    assert intra_scale_loss(pos, neg, 1.0).item() == pytest.approx(CLOSED_FORM, abs=1e-12)
    # ln(1 + 2/e) = 0.5514447..., which rounds to 0.551445
    assert CLOSED_FORM == pytest.approx(0.5514447, abs=1e-7)


def test_fusion_uses_the_same_form():
    pos, neg = orthogonal_views()
    assert fusion_loss(pos, neg, 1.0).item() == pytest.approx(CLOSED_FORM, abs=1e-12)
    with pytest.raises(ValueError, match="batch >= 2"):
        fusion_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), 1.0)


def test_identical_sets_are_symmetric():
    z = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    s = _sim_matrix(z, z)
    a = _one_direction(s, s, 0.5).item()
    assert a == _one_direction(s, nd.swap_last(s), 0.5).item()


@pytest.mark.parametrize("seed", range(25))
def test_intra_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    N, H = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    pos, neg = rng.standard_normal((N, H)), rng.standard_normal((N, H))
    tau = float(rng.uniform(0.1, 2.0))
    got = intra_scale_loss(Tensor(pos), Tensor(neg), tau).item()
    assert got == pytest.approx(intra_naive(pos.tolist(), neg.tolist(), tau), abs=1e-9)


def test_scale_invariance():
    rng = np.random.default_rng(1)
    pos, neg = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    a = intra_scale_loss(Tensor(pos), Tensor(neg), 0.3).item()
    b = intra_scale_loss(Tensor(pos * 7.0), Tensor(neg * 0.2), 0.3).item()
    assert a == pytest.approx(b, abs=1e-12)


def views(loc, reg, glb):
    return {s: {"pos": Tensor(v), "neg": Tensor(v)}
            for s, v in zip(("local", "regional", "global"), (loc, reg, glb))}


def test_inter_scale_extremes():
    z = np.random.default_rng(0).standard_normal((3, 4))
    assert inter_scale_loss(views(z, z, z)).item() == pytest.approx(-1.0, abs=1e-12)
    I = np.eye(3)
    e = lambda i: np.tile(I[i], (2, 1))
    assert inter_scale_loss(views(e(0), e(1), e(2))).item() == pytest.approx(0.0, abs=1e-15)


def test_pooling():
    assert np.all(pool_scale(Tensor(np.full((2, 3, 4, 5), 1.5))).data == 1.5)
    h = np.random.default_rng(0).standard_normal((2, 1, 1, 5))
    assert np.array_equal(pool_scale(Tensor(h)).data, h[:, 0, 0])


def test_fuse_blockwise_constants():
    c = [Tensor(np.full((2, 3, 4, 2), v)) for v in (1.0, 2.0, 3.0)]
    h_concat, z = fuse(*c)
    assert h_concat.shape == (2, 3, 4, 6)
    assert z.data[0].tolist() == [1, 1, 2, 2, 3, 3]
    with pytest.raises(nd.ShapeError):
        fuse(c[0], c[1], Tensor(np.ones((2, 3, 4, 3))))


def test_total_is_sum_of_logged_parts():
    rng = np.random.default_rng(2)
    h_pos = {s: Tensor(rng.standard_normal((3, 2, 4, 3))) for s in ("local", "regional", "global")}
    h_neg = {s: Tensor(rng.standard_normal((3, 2, 4, 3))) for s in ("local", "regional", "global")}
    parts = cds_terms(h_pos, h_neg, 0.2)
    assert cds_total(parts).item() == pytest.approx(sum(p.item() for p in parts.values()), abs=1e-12)
    assert cds_total({k: nd.as_tensor(0.0) for k in parts}).item() == 0.0


def test_shape_mismatch():
    with pytest.raises(nd.ShapeError):
        intra_scale_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 1.0)
