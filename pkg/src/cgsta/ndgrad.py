"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a read-only row-major ``numpy`` array. While a
:class:`Tape` is active, every primitive whose inputs require gradients
appends a node (primitive name, input ids, vector-Jacobian closure) to the
tape. :func:`backward` replays the tape in reverse.

Broadcasting is deliberately narrow: operands of an elementwise primitive
must have equal shapes, or one must be a scalar, or one shape must be a
suffix of the other (leading-batch). Everything else needs an explicit
:func:`expand` or :func:`reshape`.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-8

_ids = itertools.count(1)
_state = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    """log or div hit a zero (or negative) operand."""


class GradCheckFailure(RuntimeError):
    def __init__(self, param_index: int, element_index: int, message: str):
        super().__init__(f"param {param_index}, element {element_index}: {message}")
        self.param_index = param_index
        self.element_index = element_index


@dataclass
class Node:
    op: str
    out_id: int
    input_ids: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording (e.g. for scoring) until the block exits."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        # op outputs are owned by the tape; views of read-only inputs stay views
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = next(_ids)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return slice_(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    res = Tensor._wrap(out, needs)
    if needs:
        tape.nodes.append(Node(op, res.node_id, tuple(t.node_id for t in inputs), vjp))
    return res


# ---------------------------------------------------------------- shape rules

def _is_scalar(shape: tuple[int, ...]) -> bool:
    return len(shape) == 0 or (len(shape) == 1 and shape[0] == 1)


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    if a == b:
        return a
    if _is_scalar(b):
        return a
    if _is_scalar(a):
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if _is_scalar(shape):
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    out = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    return out.reshape(shape)


# ------------------------------------------------------------ elementwise ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape) if need_a else None,
                              _unbroadcast(g * ad, bd.shape) if need_b else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: zero denominator")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return _record("div", (a, b), out, vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow")
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0.0):
        raise DomainError("log: non-positive argument")
    return _record("log", (a,), np.log(ad), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _record("relu", (a,), np.maximum(a.data, 0.0), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


# ------------------------------------------------------------------ reductions

def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _restore(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    shape = a.shape
    return _record("sum", (a,), a.data.sum(axis=axes, keepdims=keepdims),
                   lambda g: (_restore(g, shape, axes, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1
    return _record("mean", (a,), a.data.mean(axis=axes, keepdims=keepdims),
                   lambda g: (_restore(g / count, shape, axes, keepdims),))


def max_(a, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    a = as_tensor(a)
    (ax,) = _axes(axis, a.ndim)
    idx = np.expand_dims(a.data.argmax(axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)
    shape = a.shape

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        full = np.zeros(shape)
        np.put_along_axis(full, idx, gk, axis=ax)
        return (full,)

    return _record("max", (a,), out if keepdims else np.squeeze(out, ax), vjp)


# ------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: contraction mismatch {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul batch")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    if bd.ndim == 2 and ad.ndim > 2:
        # batched rows times one weight matrix: flatten to a single GEMM
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if need_a else None
            gb = a2.T @ g2 if need_b else None
            return (ga, gb)

    else:
        out = ad @ bd

        def vjp(g):
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
            return (ga, gb)

    return _record("matmul", (a, b), out, vjp)


# -------------------------------------------------------------- restructuring

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def expand(a, shape) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    old = a.shape

    def vjp(g):
        lead = g.ndim - len(old)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(old) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g.reshape(old),)

    return _record("expand", (a,), out, vjp)


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    (ax,) = _axes(axis, nd)
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: mismatched shapes {ts[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        pre = (slice(None),) * ax
        return tuple(g[pre + (slice(bounds[i], bounds[i + 1]),)] if ts[i].requires_grad else None
                     for i in range(len(ts)))

    return _record("concat", ts, np.concatenate([t.data for t in ts], axis=ax), vjp)


def slice_(a, idx) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, Ellipsis, None."""
    a = as_tensor(a)
    idx = idx if isinstance(idx, tuple) else (idx,)
    for i in idx:
        if not (i is None or i is Ellipsis or isinstance(i, (int, slice, np.integer))):
            raise ShapeError("slice: only basic indexing is supported")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record("slice", (a,), a.data[idx], vjp)


# ----------------------------------------------------------- composite kernels

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    (ax,) = _axes(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _record("softmax", (a,), out, vjp)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """x / max(||x||, EPS) along ``axis``; EPS guards the zero vector."""
    a = as_tensor(a)
    (ax,) = _axes(axis, a.ndim)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=ax, keepdims=True))
    floored = norm <= EPS
    den = np.where(floored, EPS, norm)
    out = x / den

    def vjp(g):
        proj = np.where(floored, 0.0, (g * out).sum(axis=ax, keepdims=True))
        return ((g - out * proj) / den,)

    return _record("l2_normalize", (a,), out, vjp)


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity along the last axis (norms floored at EPS)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        if a.shape[-1:] != b.shape[-1:]:
            raise ShapeError(f"cosine_sim: final dims differ {a.shape} vs {b.shape}")
        raise ShapeError(f"cosine_sim: shapes differ {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    nx = np.sqrt((x * x).sum(-1, keepdims=True))
    ny = np.sqrt((y * y).sum(-1, keepdims=True))
    fx, fy = nx <= EPS, ny <= EPS
    dx, dy = np.where(fx, EPS, nx), np.where(fy, EPS, ny)
    ux, uy = x / dx, y / dy
    c = (ux * uy).sum(-1, keepdims=True)
    out = np.clip(c[..., 0], -1.0, 1.0)

    def vjp(g):
        g = g[..., None]
        ga = g * (uy - np.where(fx, 0.0, c) * ux) / dx
        gb = g * (ux - np.where(fy, 0.0, c) * uy) / dy
        return (ga, gb)

    return _record("cosine_sim", (a, b), out, vjp)


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "log": log, "neg": neg, "relu": relu, "tanh": tanh,
    "sum": sum_, "mean": mean, "max": max_, "concat": concat, "slice": slice_,
    "reshape": reshape, "transpose": transpose, "softmax": softmax,
    "l2_normalize": l2_normalize, "cosine_sim": cosine_sim,
    "expand": expand, "clip": clip,
}


def apply(primitive: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply("softmax", x, axis=0)``."""
    try:
        fn = _PRIMITIVES[primitive]
    except KeyError:
        raise ValueError(f"unknown primitive {primitive!r}") from None
    if primitive == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# -------------------------------------------------------------------- backward

def backward(loss: Tensor, tape: Tape | None = None,
             wrt: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map node_id -> gradient for every node the sweep reached.
    Tensors listed in ``wrt`` are always present (zeros if unreachable).
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    if tape is None or not tape.nodes:
        raise ValueError("backward: empty tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for nid, gi in zip(node.input_ids, node.vjp(g)):
            if gi is None:
                continue
            prev = grads.get(nid)
            grads[nid] = gi if prev is None else prev + gi
    for t in wrt:
        grads.setdefault(t.node_id, np.zeros(t.shape))
        if grads[t.node_id].shape != t.shape:
            grads[t.node_id] = np.broadcast_to(grads[t.node_id], t.shape).copy()
    return grads


def grad_check(f: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray],
               step: float = 1e-4) -> float:
    """Max relative error between backward() and central differences.

    Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
    Raises GradCheckFailure naming the parameter/element where f went NaN or
    left its domain.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]
    leaves = [Tensor(p, requires_grad=True) for p in base]
    with Tape() as tape:
        loss = f(leaves)
    if not np.isfinite(loss.data).all():
        raise GradCheckFailure(-1, -1, "f is not finite at the base point")
    grads = backward(loss, tape, wrt=leaves)

    def evaluate(arrays) -> float:
        with no_grad():
            return float(f([Tensor(x) for x in arrays]).data.reshape(-1)[0])

    worst = 0.0
    for pi, p in enumerate(base):
        analytic = grads[leaves[pi].node_id].reshape(-1)
        for ei in range(p.size):
            plus = [x.copy() for x in base]
            minus = [x.copy() for x in base]
            plus[pi].reshape(-1)[ei] += step
            minus[pi].reshape(-1)[ei] -= step
            try:
                fp, fm = evaluate(plus), evaluate(minus)
            except DomainError as exc:
                raise GradCheckFailure(pi, ei, f"f left its domain: {exc}") from exc
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckFailure(pi, ei, "f returned a non-finite value")
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[ei]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
