"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to its tensors. Calling
:meth:`Tape.backward` on a scalar walks the record in reverse creation order
and accumulates gradients into the trainable :class:`Parameter` objects that
were watched during the forward pass.

All values are float64. Shapes are strict: ``add`` and ``mul`` require equal
shapes, ``affine`` is the only op that contracts a dimension, and ``scale``
multiplies by a *constant* scalar or array that broadcasts to the input.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

PRIMITIVES = (
    "affine", "add", "mul", "relu", "tanh", "sigmoid", "exp",
    "l2norm", "hinge_max0", "sum", "scale",
)


class ShapeError(ValueError):
    pass


class Parameter:
    """A trainable array plus its gradient accumulator."""

    def __init__(self, value, trainable: bool = True, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={self.value.shape}, trainable={self.trainable})"


class Tensor:
    __slots__ = ("value", "tape", "id", "requires_grad")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of primitive applications.

    Each entry is ``(op, input_ids, output_id, vjp)`` where ``vjp`` maps the
    output cotangent to a tuple of input cotangents (``None`` for inputs that do
    not require a gradient).
    """

    def __init__(self):
        self._next_id = 0
        self.records: list[tuple[str, tuple[int, ...], int, Callable]] = []
        self._watched: dict[int, Parameter] = {}

    def _new(self, value, requires_grad: bool) -> Tensor:
        t = Tensor(value, self, self._next_id, requires_grad)
        self._next_id += 1
        return t

    def constant(self, value) -> Tensor:
        return self._new(np.asarray(value, dtype=np.float64), False)

    def variable(self, value) -> Tensor:
        """A leaf that receives a gradient but is not a Parameter."""
        return self._new(np.array(value, dtype=np.float64), True)

    def watch(self, param: Parameter) -> Tensor:
        t = self._new(param.value, param.trainable)
        if param.trainable:
            self._watched[t.id] = param
        return t

    def record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable) -> Tensor:
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{op}: input tensor {x.id} belongs to a different tape")
        rg = any(x.requires_grad for x in inputs)
        out = self._new(value, rg)
        if rg:
            self.records.append((op, tuple(x.id for x in inputs), out.id, vjp))
        return out

    def backward(self, loss: Tensor, accumulate: bool = True) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar ``loss``.

        Returns cotangents keyed by node id. Gradients of watched trainable
        parameters are added to ``Parameter.grad`` when ``accumulate`` is set.
        """
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for op, in_ids, out_id, vjp in reversed(self.records):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for i, gi in zip(in_ids, vjp(g)):
                if gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        if accumulate:
            for i, p in self._watched.items():
                if i in grads:
                    p.grad = p.grad + grads[i]
        return grads


def _tape_of(*xs: Tensor) -> Tape:
    return xs[0].tape


def _need(x: Tensor, g):
    return g if x.requires_grad else None


def _same_shape(op, a: Tensor, b: Tensor):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------- primitives

def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with x of shape (in,) or (batch, in), w (in, out), b (out,)."""
    if w.value.ndim != 2 or x.value.ndim not in (1, 2) or x.value.shape[-1] != w.value.shape[0]:
        raise ShapeError(f"affine: cannot apply weight {w.value.shape} to input {x.value.shape}")
    if b is not None and b.value.shape != (w.value.shape[1],):
        raise ShapeError(f"affine: bias {b.value.shape} does not match weight {w.value.shape}")
    xv, wv = x.value, w.value
    out = xv @ wv
    if b is not None:
        out = out + b.value
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gx = _need(x, g @ wv.T)
        if w.requires_grad:
            gw = np.outer(xv, g) if xv.ndim == 1 else xv.T @ g
        else:
            gw = None
        res = [gx, gw]
        if b is not None:
            res.append(_need(b, g if g.ndim == 1 else g.sum(axis=0)))
        return res

    return _tape_of(x).record("affine", inputs, out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _tape_of(a).record("add", (a, b), a.value + b.value, lambda g: (_need(a, g), _need(b, g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _tape_of(a).record("mul", (a, b), av * bv, lambda g: (_need(a, g * bv), _need(b, g * av)))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _tape_of(x).record("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))


def hinge_max0(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.value > 0
    return _tape_of(x).record("hinge_max0", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _tape_of(x).record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(np.atleast_1d(x.value)).reshape(x.value.shape)
    return _tape_of(x).record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    return _tape_of(x).record("exp", (x,), y, lambda g: (g * y,))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - primitive name
    xv = x.value
    out = np.asarray(xv.sum(axis=axis), dtype=np.float64)

    def vjp(g):
        if axis is None:
            return (np.full_like(xv, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return _tape_of(x).record("sum", (x,), out, vjp)


def l2norm(x: Tensor, axis: int | None = None) -> Tensor:
    """Euclidean norm of the flattened input, or along ``axis``.

    At a zero vector the gradient is taken to be zero.
    """
    xv = x.value
    n = np.asarray(np.sqrt((xv * xv).sum(axis=axis)), dtype=np.float64)

    def vjp(g):
        nn = n if axis is None else np.expand_dims(n, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        safe = np.where(nn > 0, nn, 1.0)
        return (np.where(nn > 0, gg * xv / safe, 0.0),)

    return _tape_of(x).record("l2norm", (x,), n, vjp)


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or constant array broadcastable to ``x``."""
    c = np.asarray(c, dtype=np.float64)
    try:
        out = x.value * c
    except ValueError:
        raise ShapeError(f"scale: constant {c.shape} does not broadcast to {x.value.shape}") from None
    if out.shape != x.value.shape:
        raise ShapeError(f"scale: constant {c.shape} would broadcast {x.value.shape} to {out.shape}")
    return _tape_of(x).record("scale", (x,), out, lambda g: (g * c,))


_DISPATCH = {
    "affine": affine, "add": add, "mul": mul, "relu": relu, "tanh": tanh,
    "sigmoid": sigmoid, "exp": exp, "l2norm": l2norm, "hinge_max0": hinge_max0,
    "sum": sum, "scale": scale,
}


def forward_primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _DISPATCH[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}; expected one of {PRIMITIVES}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------ composite conveniences

def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.value.size if axis is None else x.value.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def blend(a: Tensor, b: Tensor, mask) -> Tensor:
    """``mask * a + (1 - mask) * b`` for a constant 0/1 mask."""
    mask = np.asarray(mask, dtype=np.float64)
    return add(scale(a, mask), scale(b, 1.0 - mask))


# --------------------------------------------------------------- verification

def grad_check(function: Callable[[Tape, Tensor], Tensor], point, epsilon: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    point = np.array(point, dtype=np.float64)

    def f(p):
        tape = Tape()
        out = function(tape, tape.variable(p))
        if not np.all(np.isfinite(out.value)):
            raise FloatingPointError(f"non-finite forward value at {p}")
        return tape, out

    tape, out = f(point)
    x_id = 0
    grads = tape.backward(out, accumulate=False)
    analytic = grads.get(x_id, np.zeros_like(point))

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for k in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[k] += epsilon
        lo[k] -= epsilon
        numeric.reshape(-1)[k] = (
            float(f(hi.reshape(point.shape))[1].value) - float(f(lo.reshape(point.shape))[1].value)
        ) / (2 * epsilon)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
