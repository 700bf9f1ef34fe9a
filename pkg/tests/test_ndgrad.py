import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cgsta import ndgrad as nd
from cgsta.ndgrad import (DomainError, GradCheckFailure, ShapeError, Tape, Tensor, backward,
                          grad_check, no_grad)


def test_matmul_hand_example():
    out = nd.apply("matmul", Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_softmax_uniform_logits():
    out = nd.apply("softmax", Tensor([0.0, 0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


@pytest.mark.parametrize("a,b,expected", [((1, 2), (2, 4), 1.0), ((1, 0), (0, 1), 0.0)])
def test_cosine_examples(a, b, expected):
    assert nd.cosine_sim(Tensor(np.array(a, float)), Tensor(np.array(b, float))).item() == \
        pytest.approx(expected, abs=1e-15)


def test_backward_square_and_mean():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    assert backward(loss, tape)[x.node_id].tolist() == [2.0, 4.0, 6.0]

    y = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        loss = y.mean()
    assert backward(loss, tape)[y.node_id].tolist() == [0.25] * 4


def test_detach_blocks_gradient():
    x = Tensor([1.0, -2.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x.detach()).sum()
    g = backward(loss, tape)
    # only the live factor contributes: d/dx (x * c) = c
    assert g[x.node_id].tolist() == [1.0, -2.0]


def test_unreachable_param_gets_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    g = backward(loss, tape, wrt=[x, unused])
    assert np.array_equal(g[unused.node_id], np.zeros((2, 2)))


def test_backward_rejects_non_scalar_and_empty_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        backward(y, tape)
    with pytest.raises(ValueError, match="empty tape"):
        backward(Tensor(1.0), Tape())


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape, no_grad():
        (x * x).sum()
    assert len(tape) == 0


def test_tensors_are_read_only():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


@pytest.mark.parametrize("a,b", [((3, 4), (4, 3)), ((2, 3), (2,)), ((2, 3, 4), (2, 4))])
def test_broadcast_outside_the_narrow_rule_is_rejected(a, b):
    with pytest.raises(ShapeError):
        Tensor(np.ones(a)) + Tensor(np.ones(b))


def test_leading_batch_and_scalar_broadcast():
    x = Tensor(np.ones((2, 3, 4)))
    assert (x + Tensor(np.ones((3, 4)))).shape == (2, 3, 4)
    assert (x * 2.0).shape == (2, 3, 4)
    assert nd.expand(Tensor(np.ones((1, 4))), (3, 4)).shape == (3, 4)


def test_domain_errors():
    with pytest.raises(DomainError):
        nd.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        Tensor([1.0]) / Tensor([0.0])
    with pytest.raises(DomainError):
        nd.exp(Tensor([1000.0]))


def test_matmul_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_apply_unknown_primitive():
    with pytest.raises(ValueError, match="unknown primitive"):
        nd.apply("conv", Tensor([1.0]))


def test_grad_check_reports_nan_parameter():
    def f(leaves):
        return nd.log(leaves[0]).sum()

    with pytest.raises(GradCheckFailure) as info:
        grad_check(f, [np.array([1e-5, 1.0])], step=1e-4)
    assert info.value.param_index == 0


def test_grad_check_exp_sum_is_tight():
    x = np.random.default_rng(0).uniform(-2, 2, 5)
    assert grad_check(lambda p: nd.exp(p[0]).sum(), [x], 1e-4) < 1e-6


# --- every primitive against central differences on inputs in [-2, 2]

_RNG = np.random.default_rng(7)


def _u(*shape):
    return _RNG.uniform(-2, 2, shape)


def _pos(*shape):
    return _RNG.uniform(0.5, 2, shape)


PRIMITIVE_CASES = {
    "matmul": (lambda p: (p[0] @ p[1]).sum(), [_u(2, 3, 4), _u(4, 2)]),
    "matmul_batched": (lambda p: ((p[0] @ p[1]) * (p[0] @ p[1])).sum(), [_u(2, 3, 4), _u(2, 4, 3)]),
    "add": (lambda p: ((p[0] + p[1]) * p[0]).sum(), [_u(2, 3), _u(3)]),
    "sub": (lambda p: ((p[0] - p[1]) * p[0]).sum(), [_u(2, 3), _u(2, 3)]),
    "mul": (lambda p: (p[0] * p[1]).sum(), [_u(3, 2), _u(2)]),
    "div": (lambda p: (p[0] / p[1]).sum(), [_u(3, 2), _pos(3, 2)]),
    "exp": (lambda p: nd.exp(p[0]).sum(), [_u(4)]),
    "log": (lambda p: nd.log(p[0]).sum(), [_pos(4)]),
    "neg": (lambda p: (-p[0] * p[0]).sum(), [_u(4)]),
    "relu": (lambda p: (nd.relu(p[0]) * p[0]).sum(), [np.array([-1.5, -0.3, 0.4, 1.7])]),
    "tanh": (lambda p: nd.tanh(p[0]).sum(), [_u(5)]),
    "clip": (lambda p: (nd.clip(p[0], -1.0, 1.0) * p[0]).sum(), [np.array([-1.7, -0.2, 0.6, 1.4])]),
    "sum_axis": (lambda p: (p[0].sum(axis=1) * p[0].sum(axis=1)).sum(), [_u(3, 4)]),
    "mean_axis": (lambda p: (p[0].mean(axis=(0, 2)) * p[0].mean(axis=(0, 2))).sum(), [_u(2, 3, 2)]),
    "max_axis": (lambda p: nd.max_(p[0], axis=1).sum(), [np.array([[0.1, 1.2, -0.4], [2.0, -1.0, 0.3]])]),
    "concat": (lambda p: (nd.concat([p[0], p[1]], axis=1) * nd.concat([p[1], p[0]], axis=1)).sum(),
               [_u(2, 3), _u(2, 3)]),
    "slice": (lambda p: (p[0][:, 1:3] * p[0][:, 0:2]).sum(), [_u(3, 4)]),
    "reshape": (lambda p: (p[0].reshape(6, 2) @ p[1]).sum(), [_u(3, 4), _u(2, 2)]),
    "transpose": (lambda p: (nd.transpose(p[0], (1, 0, 2)) * p[1]).sum(), [_u(2, 3, 2), _u(3, 2, 2)]),
    "softmax": (lambda p: (nd.softmax(p[0], axis=-1) * p[1]).sum(), [_u(3, 4), _u(3, 4)]),
    "l2_normalize": (lambda p: (nd.l2_normalize(p[0], axis=-1) * p[1]).sum(), [_u(3, 4), _u(3, 4)]),
    "cosine_sim": (lambda p: nd.cosine_sim(p[0], p[1]).sum(), [_u(3, 5), _u(3, 5)]),
    "expand": (lambda p: (nd.expand(p[0], (3, 4)) * p[1]).sum(), [_u(1, 4), _u(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    f, params = PRIMITIVE_CASES[name]
    assert grad_check(f, params, step=1e-4) < 1e-3


# --- properties

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = nd.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 5)), elements=finite))
def test_l2_normalize_unit_norm(x):
    norms = np.linalg.norm(x, axis=-1)
    out = nd.l2_normalize(Tensor(x), axis=-1).data
    big = norms > 1e-6
    np.testing.assert_allclose(np.linalg.norm(out[big], axis=-1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_cosine_in_range(a, b):
    c = nd.cosine_sim(Tensor(a), Tensor(b)).data
    assert np.all(c <= 1.0) and np.all(c >= -1.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_replay_is_bit_identical(x):
    def run():
        t = Tensor(x, requires_grad=True)
        with Tape() as tape:
            loss = (nd.tanh(t @ Tensor(np.ones((4, 2)))) * 1.5).sum()
        return loss.data.copy(), backward(loss, tape)[t.node_id]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()
