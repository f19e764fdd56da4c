"""Tape-based reverse-mode differentiation over the primitives in :mod:`catattn.tensor`.

Operations record onto the innermost active :class:`GradTape`. Outside a tape
(or when no input requires a gradient) they evaluate eagerly and record
nothing, which is how evaluation-mode forwards run.

    >>> x = Variable([1.0, 2.0, 3.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = sum_(x * x)
    >>> tape.backward(y)
    >>> x.grad.tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError

_ids = itertools.count()
_tape_stack: list["GradTape"] = []


class GradCheckError(RuntimeError):
    """The finite-difference oracle could not produce a trustworthy answer."""


class Variable:
    """A tensor value with an optional gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(value, (np.ndarray, np.generic)) and dtype is None:
            # arrays and numpy scalars keep their own precision
            self.value = np.asarray(value)
        else:
            self.value = np.asarray(value, dtype=dtype or T.default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


@dataclass
class Node:
    kind: str
    inputs: tuple[Variable, ...]
    output: Variable
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    forward: Callable[..., np.ndarray] | None = None


@dataclass
class GradTape:
    """Ordered record of differentiable operations."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def record(self, kind, inputs, value, backward, forward=None) -> Variable:
        out = Variable(value, requires_grad=True)
        self.nodes.append(Node(kind, tuple(inputs), out, backward, forward))
        return out

    def backward(self, root: Variable) -> None:
        """Accumulate d(root)/dv into ``v.grad`` for every recorded Variable."""
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if not self.nodes:
            return
        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.value)}
        for node in reversed(self.nodes):
            g = grads.pop(node.output.node_id, None)
            if g is None:
                continue
            node.output.grad = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not isinstance(inp, Variable) or not inp.requires_grad:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
        # whatever is left belongs to leaves
        leaves = {id(v): v for node in self.nodes for v in node.inputs if isinstance(v, Variable)}
        for v in leaves.values():
            g = grads.pop(v.node_id, None)
            if g is not None:
                _accumulate_into(v, g)

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward from current leaf values."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            if node.forward is None:
                raise RuntimeError(f"node {node.kind!r} cannot be replayed")
            args = [values.get(v.node_id, v.value) if isinstance(v, Variable) else v for v in node.inputs]
            val = node.forward(*args)
            values[node.output.node_id] = val
            outs.append(val)
        return outs


def _accumulate_into(v: Variable, g: np.ndarray) -> None:
    g = g.astype(v.value.dtype, copy=False)
    v.grad = g.copy() if v.grad is None else v.grad + g


def active_tape() -> GradTape | None:
    return _tape_stack[-1] if _tape_stack else None


def _wrap(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(np.asarray(x, dtype=T.default_dtype()))


def _emit(kind, inputs, value, backward, forward=None) -> Variable:
    tape = active_tape()
    if tape is None or not any(isinstance(v, Variable) and v.requires_grad for v in inputs):
        return Variable(value)
    return tape.record(kind, inputs, value, backward, forward)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Pointwise
# --------------------------------------------------------------------------


def add(a, b) -> Variable:
    a, b = _wrap(a), _wrap(b)
    out = T.add(a.value, b.value)
    return _emit("add", (a, b), out, lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), T.add)


def sub(a, b) -> Variable:
    a, b = _wrap(a), _wrap(b)
    T.broadcast_shape(a.shape, b.shape)
    out = a.value - b.value
    return _emit(
        "sub", (a, b), out, lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), np.subtract
    )


def mul(a, b) -> Variable:
    if not isinstance(b, Variable) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Variable) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    out = T.multiply(av, bv)
    return _emit(
        "multiply", (a, b), out, lambda g: (unbroadcast(g * bv, a.shape), unbroadcast(g * av, b.shape)), T.multiply
    )


def scale(x: Variable, s: float) -> Variable:
    out = T.scale(x.value, s)
    return _emit("scale", (x,), out, lambda g: (g * g.dtype.type(s),), lambda v: T.scale(v, s))


def neg(x: Variable) -> Variable:
    return _emit("negate", (x,), -x.value, lambda g: (-g,), T.negate)


def sigmoid(x: Variable) -> Variable:
    y = T.sigmoid(x.value)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1 - y),), T.sigmoid)


def relu(x: Variable) -> Variable:
    mask = x.value > 0
    return _emit("relu", (x,), T.relu(x.value), lambda g: (g * mask,), T.relu)


def log_clamped(x: Variable) -> Variable:
    xv = x.value
    live = xv > T.LOG_FLOOR

    def back(g):
        return (np.where(live, g / np.where(live, xv, 1), 0).astype(g.dtype),)

    return _emit("log_clamped", (x,), T.log_clamped(xv), back, T.log_clamped)


def safe_reciprocal(x: Variable) -> Variable:
    """1/x where x != 0, and 0 (with zero gradient) where x == 0."""
    xv = x.value
    nz = xv != 0
    inv = np.where(nz, 1 / np.where(nz, xv, 1), 0).astype(xv.dtype)

    def fwd(v):
        m = v != 0
        return np.where(m, 1 / np.where(m, v, 1), 0).astype(v.dtype)

    return _emit("safe_reciprocal", (x,), inv, lambda g: (-g * inv * inv,), fwd)


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------


def _axes(axes, ndim):
    return tuple(range(ndim)) if axes is None else T._normalize_axes(axes, ndim)


def sum_(x: Variable, axes=None, keepdims: bool = False) -> Variable:
    ax = _axes(axes, x.value.ndim)
    out = x.value.sum(axis=ax, keepdims=keepdims)
    shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), out, back, lambda v: v.sum(axis=ax, keepdims=keepdims))


def mean(x: Variable, axes=None, keepdims: bool = False) -> Variable:
    ax = _axes(axes, x.value.ndim)
    count = int(np.prod([x.shape[a] for a in ax]))
    return scale(sum_(x, ax, keepdims), 1.0 / count)


def amax(x: Variable, axes) -> Variable:
    """Max over ``axes`` (kept as extent 1); gradient goes to the first maximum."""
    ax = T._normalize_axes(axes, x.value.ndim)
    vals, _ = T.reduce_along(x.value, ax, "max")
    mask = None

    def back(g):
        nonlocal mask
        if mask is None:
            mask = T.argmax_mask(x.value, ax)
        return (mask * g,)

    return _emit("max", (x,), vals, back, lambda v: T.reduce_along(v, ax, "max")[0])


def amin(x: Variable, axes) -> Variable:
    return neg(amax(neg(x), axes))


def softmax(x: Variable, axes) -> Variable:
    ax = T._normalize_axes(axes, x.value.ndim)
    y = T.softmax_along(x.value, ax)

    def back(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _emit("softmax", (x,), y, back, lambda v: T.softmax_along(v, ax))


# --------------------------------------------------------------------------
# Shape
# --------------------------------------------------------------------------


def reshape(x: Variable, shape) -> Variable:
    old = x.shape
    return _emit("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(old),), lambda v: v.reshape(shape))


def pad_edge(x: Variable, pad: int) -> Variable:
    """Replicate-pad H and W of an NCHW tensor by ``pad`` on every side."""
    if pad == 0:
        return x
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))

    def fwd(v):
        return np.pad(v, widths, mode="edge")

    def back(g):
        g = g.copy()
        g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
        g[:, :, -pad - 1, :] += g[:, :, -pad:, :].sum(axis=2)
        g[:, :, :, pad] += g[:, :, :, :pad].sum(axis=3)
        g[:, :, :, -pad - 1] += g[:, :, :, -pad:].sum(axis=3)
        return (np.ascontiguousarray(g[:, :, pad:-pad, pad:-pad]),)

    return _emit("pad_edge", (x,), fwd(x.value), back, fwd)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


def conv2d(x: Variable, kernel: Variable, bias: Variable | None = None, padding=0, stride=1) -> Variable:
    bv = None if bias is None else bias.value
    out, cols = T.conv2d_with_cols(x.value, kernel.value, bv, padding, stride)
    xshape = x.shape

    def back(g):
        gx, gk, gb = T.conv2d_backward(g, xshape, cols, kernel.value, padding, stride)
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", inputs, out, back, lambda *v: T.conv2d(*v, padding=padding, stride=stride))


def linear(x: Variable, weight: Variable, bias: Variable | None = None) -> Variable:
    out = T.linear(x.value, weight.value, None if bias is None else bias.value)
    xv, wv = x.value, weight.value

    def back(g):
        grads = (g @ wv, g.T @ xv)
        return grads if bias is None else grads + (g.sum(axis=0),)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", inputs, out, back, T.linear)


def gaussian_filter(x: Variable, k: int, mode: str, sigma: float = 1.0) -> Variable:
    out = T.gaussian_filter(x.value, k, mode, sigma)
    n, _, h, w = x.shape

    def back(g):
        g = T.gaussian_operator(h, k, sigma, g.dtype).T @ g
        if mode == "full-2D":
            g = g @ T.gaussian_operator(w, k, sigma, g.dtype)
        return (g,)

    return _emit("gaussian_filter", (x,), out, back, lambda v: T.gaussian_filter(v, k, mode, sigma))


def batch_norm(
    x: Variable,
    gamma: Variable,
    beta: Variable,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Variable:
    """Per-channel batch normalisation of an NCHW tensor.

    In training mode the batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    xv = x.value
    c = xv.shape[1]
    shape = (1, c, 1, 1)
    if training:
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        m = xv.size // c
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = (xv - mu.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.value.reshape(shape) + beta.value.reshape(shape)

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.value.reshape(shape)
        if training:
            m = xv.size // c
            gx = (
                inv.reshape(shape)
                / m
                * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True) - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            )
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, gg, gb

    return _emit("batch_norm", (x, gamma, beta), out, back)


def cross_entropy(logits: Variable, labels) -> Variable:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    n, k = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return _emit("cross_entropy", (logits,), np.asarray(loss, dtype=z.dtype), back)


# --------------------------------------------------------------------------
# Finite-difference oracle
# --------------------------------------------------------------------------


def finite_diff_check(f: Callable[[], Variable], param: Variable, h: float = 1e-5) -> float:
    """Max relative error between autograd and central differences for ``param``.

    ``f`` is a zero-argument closure that reads ``param.value`` and returns a
    scalar Variable. Relative error is ``|a - b| / max(1e-8, |a| + |b|)``.
    """
    saved = param.value.copy()
    param.grad = None
    with GradTape() as tape:
        root = f()
    tape.backward(root)
    analytic = np.zeros_like(saved) if param.grad is None else param.grad.copy()
    base = float(root.value)
    if float(f().value) != base:
        raise GradCheckError("closure is not deterministic: repeated evaluations differ")

    numeric = np.zeros(saved.shape, dtype=np.float64)
    work = saved.copy()
    try:
        for i in np.ndindex(saved.shape):
            orig = work[i]
            work[i] = orig + h
            param.value = work
            fp = float(f().value)
            work[i] = orig - h
            param.value = work
            fm = float(f().value)
            work[i] = orig
            numeric[i] = (fp - fm) / (2 * h)
    finally:
        param.value = saved
    a = analytic.astype(np.float64)
    err = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
