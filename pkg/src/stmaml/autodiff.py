"""Reverse-mode automatic differentiation over dense float64 tensors.

Every primitive records a node on an append-only :class:`Tape`. Gradients
are computed by a single reverse sweep over the tape; the vector-Jacobian
products are themselves written with tensor primitives, so passing
``create_graph=True`` to :func:`grad` records the backward pass too and the
returned gradients can be differentiated again.

Example
-------
>>> tape = Tape()
>>> x = tape.watch(3.0)
>>> (g,) = grad(x * x, [x])
>>> float(g.values)
6.0
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "GradientError",
    "ShapeError",
    "grad",
    "no_record",
    "finite_difference_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "getitem",
    "concat",
    "broadcast_to",
    "sum",
    "mean",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "softplus",
    "square",
]


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


class no_record:
    """Context manager that suspends tape recording on this thread."""

    def __enter__(self):
        self._prev = _recording()
        _state.recording = False
        return self

    def __exit__(self, *exc):
        _state.recording = self._prev
        return False


class _Node:
    __slots__ = ("index", "op", "inputs", "vjp", "tape")

    def __init__(self, tape, op, inputs, vjp):
        self.tape = tape
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.index = len(tape.nodes)


class Tape:
    """Append-only record of primitive applications.

    Nodes are appended in execution order, so the list is always
    topologically sorted. Use one tape per worker thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def watch(self, values) -> "Tensor":
        """Place a copy of ``values`` on this tape as a differentiable leaf."""
        t = Tensor(np.array(values, dtype=np.float64))
        t.node = _Node(self, "leaf", (), None)
        self.nodes.append(t.node)
        return t


class Tensor:
    """Shape-carrying float64 array, optionally attached to a tape."""

    __slots__ = ("values", "node")
    __array_priority__ = 100

    def __init__(self, values, node: _Node | None = None):
        if isinstance(values, np.ndarray) and values.dtype == np.float64:
            self.values = values
        else:
            self.values = np.asarray(values, dtype=np.float64)
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self):
        where = "detached" if self.node is None else f"node={self.node.index}"
        return f"Tensor(shape={self.shape}, {where})\n{self.values!r}"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __neg__ = lambda a: neg(a)
    __getitem__ = lambda a, idx: getitem(a, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, values: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    """Wrap ``values`` in a Tensor, adding a tape node if any input is tracked."""
    if not _recording():
        return Tensor(values)
    tape = None
    for t in inputs:
        if t.node is not None:
            if tape is None:
                tape = t.node.tape
            elif t.node.tape is not tape:
                raise GradientError(f"{op}: inputs live on different tapes")
    if tape is None:
        return Tensor(values)
    node = _Node(tape, op, inputs, vjp)
    tape.nodes.append(node)
    return Tensor(values, node)


def _is_scalar(t: Tensor) -> bool:
    return t.values.ndim == 0


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    # only scalar-tensor broadcasting is supported
    if g.shape == shape:
        return g
    return sum(g)


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)

    def vjp(g, ins):
        x, y = ins
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _record("add", a.values + b.values, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)

    def vjp(g, ins):
        x, y = ins
        return _unbroadcast(g, x.shape), _unbroadcast(neg(g), y.shape)

    return _record("sub", a.values - b.values, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)

    def vjp(g, ins):
        x, y = ins
        return _unbroadcast(mul(g, y), x.shape), _unbroadcast(mul(g, x), y.shape)

    return _record("mul", a.values * b.values, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)

    def vjp(g, ins):
        x, y = ins
        gx = div(g, y)
        gy = neg(div(mul(gx, x), y))
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _record("div", a.values / b.values, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.values, (a,), lambda g, ins: (neg(g),))


def square(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, ins):
        return (mul(g, mul(ins[0], 2.0)),)

    return _record("square", a.values * a.values, (a,), vjp)


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g, ins):
        x, y = ins
        return matmul(g, transpose(y)), matmul(transpose(x), g)

    return _record("matmul", a.values @ b.values, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record(
        "transpose",
        np.ascontiguousarray(a.values.T),
        (a,),
        lambda g, ins: (transpose(g),),
    )


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _record("reshape", out, (a,), lambda g, ins: (reshape(g, ins[0].shape),))


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing. The backward pass scatters into zeros."""
    a = _as_tensor(a)
    out = np.array(a.values[index])

    def vjp(g, ins):
        return (_scatter(g, index, ins[0].shape),)

    return _record("getitem", out, (a,), vjp)


def _scatter(g, index, shape) -> Tensor:
    g = _as_tensor(g)
    out = np.zeros(shape)
    out[index] = g.values
    return _record("scatter", out, (g,), lambda gg, ins: (getitem(gg, index),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    if nd == 0 or axis not in (-1, nd - 1):
        raise ShapeError("concat: only the last axis of non-scalar tensors is supported")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:-1] != lead:
            shapes = " and ".join(str(t.shape) for t in ts)
            raise ShapeError(f"concat: incompatible shapes {shapes}")
    widths = [t.shape[-1] for t in ts]
    bounds = np.cumsum([0] + widths)

    def vjp(g, ins):
        return tuple(
            getitem(g, (Ellipsis, slice(int(lo), int(hi))))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _record("concat", np.concatenate([t.values for t in ts], axis=-1), ts, vjp)


def broadcast_to(a, shape, axis: int | None = None) -> Tensor:
    """Repeat ``a`` along a new ``axis`` (or fill ``shape`` from a scalar).

    The inverse of :func:`sum`: ``sum(broadcast_to(v, s, k), k)`` has v's shape.
    """
    a = _as_tensor(a)
    shape = tuple(shape)
    if axis is None:
        if not _is_scalar(a):
            raise ShapeError(f"broadcast_to: expected a scalar, got shape {a.shape}")
        out = np.full(shape, a.values)
    else:
        axis = axis % len(shape)
        expect = shape[:axis] + shape[axis + 1 :]
        if a.shape != expect:
            raise ShapeError(f"broadcast_to: shape {a.shape} does not fit {shape} along axis {axis}")
        out = np.ascontiguousarray(np.broadcast_to(np.expand_dims(a.values, axis), shape))
    return _record("broadcast_to", out, (a,), lambda g, ins: (sum(g, axis),))


# ---------------------------------------------------------------- reductions


def _seq_sum(v: np.ndarray, axis):
    # cumsum accumulates strictly left to right, unlike np.sum's pairwise scheme
    if axis is None:
        flat = v.reshape(-1)
        return np.cumsum(flat)[-1] if flat.size else np.float64(0.0)
    if v.shape[axis] == 0:
        return np.sum(v, axis=axis)
    return np.take(np.cumsum(v, axis=axis), -1, axis=axis)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    if axis is not None:
        axis = axis % a.ndim

    def vjp(g, ins):
        return (broadcast_to(g, ins[0].shape, axis),)

    return _record("sum", np.asarray(_seq_sum(a.values, axis), dtype=np.float64), (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    return mul(sum(a, axis), 1.0 / n)


# --------------------------------------------------------------- elementwise


def _sigmoid_values(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_values(a.values)

    def vjp(g, ins):
        s = sigmoid(ins[0]) if _recording() else Tensor(out)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _record("sigmoid", out, (a,), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.values)

    def vjp(g, ins):
        t = tanh(ins[0]) if _recording() else Tensor(out)
        return (mul(g, sub(1.0, square(t))),)

    return _record("tanh", out, (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.values > 0).astype(np.float64)
    return _record("relu", a.values * mask, (a,), lambda g, ins: (mul(g, mask),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)

    def vjp(g, ins):
        e = exp(ins[0]) if _recording() else Tensor(out)
        return (mul(g, e),)

    return _record("exp", out, (a,), vjp)


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _record("log", np.log(a.values), (a,), lambda g, ins: (div(g, ins[0]),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    return _record(
        "softplus",
        np.logaddexp(0.0, a.values),
        (a,),
        lambda g, ins: (mul(g, sigmoid(ins[0])),),
    )


# ------------------------------------------------------------------ gradient


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors in ``wrt`` that the output does not depend on get zero gradients.
    With ``create_graph`` the backward computation is itself recorded, so the
    results can be passed to another ``grad`` call.
    """
    if output.size != 1:
        raise GradientError(f"grad: output must be a scalar, got shape {output.shape}")
    tape = output.node.tape if output.node is not None else None
    for w in wrt:
        if w.node is None:
            raise GradientError("grad: a wrt tensor is detached from any tape")
        if tape is None:
            tape = w.node.tape
        elif w.node.tape is not tape:
            raise GradientError("grad: wrt tensor lives on a different tape than the output")
    if output.node is None:
        return [Tensor(np.zeros(w.shape)) for w in wrt]

    adjoint: dict[int, Tensor] = {output.node.index: Tensor(np.ones(output.shape))}
    targets = {w.node.index for w in wrt}
    lowest = min(targets)
    nodes = tape.nodes

    prev = _recording()
    _state.recording = bool(create_graph)
    try:
        for i in range(output.node.index, lowest - 1, -1):
            g = adjoint.get(i)
            node = nodes[i]
            if g is None or node.vjp is None:
                continue
            if i not in targets:
                del adjoint[i]
            grads = node.vjp(g, node.inputs)
            for inp, gi in zip(node.inputs, grads):
                if inp.node is None or gi is None:
                    continue
                j = inp.node.index
                acc = adjoint.get(j)
                adjoint[j] = gi if acc is None else add(acc, gi)
    finally:
        _state.recording = prev

    out = []
    for w in wrt:
        g = adjoint.get(w.node.index)
        if g is None:
            g = Tensor(np.zeros(w.shape))
        elif g.shape != w.shape:
            g = reshape(g, w.shape)
        out.append(g)
    return out


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x, eps: float = 1e-6
) -> float:
    """Max relative error between :func:`grad` and central differences.

    The error per coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    xt = tape.watch(x)
    out = f(xt)
    if not np.all(np.isfinite(out.values)):
        raise GradientError("finite_difference_check: f is not finite at x")
    (analytic,) = grad(out, [xt])
    analytic = analytic.values.reshape(-1)

    numeric = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(x.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += eps
        lo[i] -= eps
        # constant inputs record nothing, yet f may still differentiate internally
        fh = float(f(Tensor(hi.reshape(x.shape))).values)
        fl = float(f(Tensor(lo.reshape(x.shape))).values)
        if not (np.isfinite(fh) and np.isfinite(fl)):
            raise GradientError(f"finite_difference_check: f is not finite near coordinate {i}")
        numeric[i] = (fh - fl) / (2 * eps)
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
