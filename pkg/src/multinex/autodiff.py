"""Tape-based reverse-mode differentiation over a small fixed operator set.

Every primitive accepts plain numpy arrays or :class:`Value` objects. With
plain arrays it simply returns the numpy result, so inference and training
share the same forward kernels. When any input is a ``Value`` the result is
a ``Value`` and a :class:`TapeNode` holding the vector-Jacobian product
closure is appended to the owning :class:`Tape`.

Spatial operators work on tensors laid out as ``(..., H, W, C)``; leading
axes are treated as a batch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels

__all__ = [
    "Tape", "TapeNode", "Value", "backward", "data_of",
    "add", "sub", "mul", "div", "neg", "power", "relu", "sigmoid", "tanh", "clamp",
    "mean", "sum_", "conv1x1", "dense", "dwconv", "layer_norm", "gap",
    "gaussian_filter_valid", "avg_pool2",
]


class Value:
    """A tensor recorded on a tape."""

    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, data, tape: Tape, name: str | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.name = name
        self.vid = next(tape._ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Value
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    nodes: list[TapeNode] = field(default_factory=list)
    params: dict[str, Value] = field(default_factory=dict)

    def __post_init__(self):
        self._ids = itertools.count()

    def param(self, name: str, data) -> Value:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered on this tape")
        v = Value(data, self, name=name)
        self.params[name] = v
        return v

    def watch(self, data) -> Value:
        """An unnamed differentiable leaf (used by gradient checks)."""
        return Value(data, self)


def data_of(x):
    return x.data if isinstance(x, Value) else x


def _tape_of(inputs):
    for x in inputs:
        if isinstance(x, Value):
            return x.tape
    return None


def _record(op, inputs, out, vjp):
    tape = _tape_of(inputs)
    if tape is None:
        return out
    v = Value(out, tape)
    tape.nodes.append(TapeNode(op, tuple(inputs), v, vjp))
    return v


def backward(tape: Tape, loss: Value) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns gradients keyed by parameter name.

    Parameters the loss does not depend on receive zero gradients.
    """
    if not isinstance(loss, Value) or loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.data.shape}")
    grads = {loss.vid: np.ones_like(loss.data)}
    keep = {v.vid for v in tape.params.values()}
    for node in reversed(tape.nodes):
        g = grads.get(node.output.vid)
        if g is None:
            continue
        if node.output.vid not in keep:
            del grads[node.output.vid]
        for x, gx in zip(node.inputs, node.vjp(g)):
            if not isinstance(x, Value) or gx is None:
                continue
            prev = grads.get(x.vid)
            grads[x.vid] = gx if prev is None else prev + gx
    return {
        name: grads.get(v.vid, np.zeros_like(v.data)).astype(v.data.dtype, copy=False)
        for name, v in tape.params.items()
    }


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- element-wise

def add(a, b):
    x, y = data_of(a), data_of(b)
    sx, sy = np.shape(x), np.shape(y)
    return _record("add", (a, b), x + y, lambda g: (_unbroadcast(g, sx), _unbroadcast(g, sy)))


def sub(a, b):
    x, y = data_of(a), data_of(b)
    sx, sy = np.shape(x), np.shape(y)
    return _record("sub", (a, b), x - y, lambda g: (_unbroadcast(g, sx), -_unbroadcast(g, sy)))


def mul(a, b):
    """Hadamard product with numpy broadcasting (e.g. (H,W,1) against (H,W,3))."""
    x, y = data_of(a), data_of(b)
    sx, sy = np.shape(x), np.shape(y)
    return _record("mul", (a, b), x * y, lambda g: (_unbroadcast(g * y, sx), _unbroadcast(g * x, sy)))


def div(a, b):
    x, y = data_of(a), data_of(b)
    sx, sy = np.shape(x), np.shape(y)
    out = x / y
    return _record("div", (a, b), out, lambda g: (_unbroadcast(g / y, sx), _unbroadcast(-g * out / y, sy)))


def neg(a):
    return _record("neg", (a,), -data_of(a), lambda g: (-g,))


def power(a, p: float):
    x = data_of(a)
    out = x ** p

    def vjp(g):
        if float(p).is_integer():
            return (g * (p * x ** (p - 1)),)
        # fractional powers: zero derivative where the base is not positive
        safe = np.where(x > 0, x, 1)
        return (g * np.where(x > 0, p * safe ** (p - 1), 0),)

    return _record("power", (a,), out, vjp)


def relu(a):
    x = data_of(a)
    mask = x > 0
    return _record("relu", (a,), np.where(mask, x, 0).astype(x.dtype, copy=False), lambda g: (g * mask,))


def sigmoid(a):
    x = data_of(a)
    out = 0.5 * (np.tanh(0.5 * x) + 1)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def tanh(a):
    out = np.tanh(data_of(a))
    return _record("tanh", (a,), out, lambda g: (g * (1 - out * out),))


def clamp(a, lo=0.0, hi=1.0):
    x = data_of(a)
    mask = (x >= lo) & (x <= hi)
    return _record("clamp", (a,), np.clip(x, lo, hi), lambda g: (g * mask,))


# ------------------------------------------------------------------ reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    x = data_of(a)
    axes = _norm_axes(axis, x.ndim)
    out = x.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims=False):
    x = data_of(a)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[i] for i in axes]))
    out = x.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _record("mean", (a,), out, vjp)


def gap(a):
    """Global average pooling over the two spatial axes, keeping them as size 1."""
    return mean(a, axis=(-3, -2), keepdims=True)


# --------------------------------------------------------------------- linear

def conv1x1(x, w, b=None):
    """Pointwise convolution; ``w`` has shape (C_in, C_out)."""
    xd, wd = data_of(x), data_of(w)
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"conv1x1 expects {wd.shape[0]} input channels, got {xd.shape[-1]}")
    out = xd @ wd
    if b is not None:
        out = out + data_of(b)

    def vjp(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = None if b is None else g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return _record("conv1x1", (x, w, b), out, vjp)


def dense(x, w):
    """Linear map on the last axis with a bias-free (out, in) weight matrix."""
    xd, wd = data_of(x), data_of(w)
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"dense expects {wd.shape[1]} inputs, got {xd.shape[-1]}")
    out = xd @ wd.T

    def vjp(g):
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        return g @ wd, gw

    return _record("dense", (x, w), out, vjp)


def dwconv(x, k, b=None):
    """Depthwise 'same' convolution (cross-correlation), zero padding, stride 1.

    ``k`` has shape (kh, kw, C) with odd kh, kw.
    """
    xd, kd = data_of(x), data_of(k)
    kh, kw, c = kd.shape
    if xd.shape[-1] != c:
        raise ValueError(f"dwconv kernel has {c} channels, input has {xd.shape[-1]}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("dwconv needs odd kernel sizes")
    out = _kernels.dwconv(xd, kd)
    if b is not None:
        out = out + data_of(b)

    def vjp(g):
        gx, gk = _kernels.dwconv_grads(xd, kd, g)
        gb = None if b is None else g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gk, gb

    return _record("dwconv", (x, k, b), out, vjp)


def layer_norm(x, scale, shift, eps: float = 1e-5):
    """Per-pixel normalisation over the channel axis followed by an affine map."""
    xd, sd, bd = data_of(x), data_of(scale), data_of(shift)
    if xd.shape[-1] != sd.shape[-1]:
        raise ValueError(f"layer_norm has {sd.shape[-1]} channels, input has {xd.shape[-1]}")
    out, xhat, inv = _kernels.layer_norm(xd, sd, bd, eps)

    def vjp(g):
        return _kernels.layer_norm_grads(g, xhat, inv, sd)

    return _record("layer_norm", (x, scale, shift), out, vjp)


def _corr_valid(x, taps, axis):
    n = len(taps)
    size = x.shape[axis] - n + 1
    out = None
    for t in range(n):
        term = taps[t] * np.take(x, range(t, t + size), axis=axis)
        out = term if out is None else out + term
    return out


def _corr_valid_adjoint(g, taps, axis, n_in):
    n = len(taps)
    size = g.shape[axis]
    shape = list(g.shape)
    shape[axis] = n_in
    out = np.zeros(shape, dtype=g.dtype)
    for t in range(n):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(t, t + size)
        out[tuple(idx)] += taps[t] * g
    return out


def gaussian_filter_valid(x, taps):
    """Separable 'valid' filtering with the 1-D kernel ``taps`` along H then W."""
    xd = data_of(x)
    taps = np.asarray(taps, dtype=xd.dtype)
    if xd.shape[-3] < len(taps) or xd.shape[-2] < len(taps):
        raise ValueError(f"image {xd.shape[-3]}x{xd.shape[-2]} smaller than a {len(taps)}-tap window")
    h_axis, w_axis = xd.ndim - 3, xd.ndim - 2
    tmp = _corr_valid(xd, taps, h_axis)
    out = _corr_valid(tmp, taps, w_axis)

    def vjp(g):
        gt = _corr_valid_adjoint(g, taps, w_axis, tmp.shape[w_axis])
        return (_corr_valid_adjoint(gt, taps, h_axis, xd.shape[h_axis]),)

    return _record("gaussian_filter", (x,), out, vjp)


def avg_pool2(x):
    """2x2 average pooling with stride 2; a trailing odd row/column is dropped."""
    xd = data_of(x)
    H, W = xd.shape[-3], xd.shape[-2]
    h2, w2 = H // 2, W // 2
    lead = xd.shape[:-3]
    c = xd.shape[-1]
    crop = xd[..., :2 * h2, :2 * w2, :]
    out = crop.reshape(*lead, h2, 2, w2, 2, c).mean(axis=(-4, -2))

    def vjp(g):
        up = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2) / 4
        gx = np.zeros(xd.shape, dtype=up.dtype)
        gx[..., :2 * h2, :2 * w2, :] = up
        return (gx,)

    return _record("avg_pool2", (x,), out, vjp)
