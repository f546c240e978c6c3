"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Only the operator set needed by the transceiver is provided. A :class:`Graph`
records every operation in execution order, so the tape is topologically
sorted by construction and :func:`backward` is a single reverse sweep.

Complex quantities are carried as real arrays with a trailing axis of size 2
(real, imaginary); :func:`complex_linear` lifts any complex-linear map given
with its adjoint into the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible; ``axis`` names the offending axis."""

    def __init__(self, op: str, axis: str, message: str):
        super().__init__(f"{op}: axis '{axis}': {message}")
        self.op = op
        self.axis = axis


class ConfigurationError(ValueError):
    pass


@dataclass
class Parameter:
    """A named tensor owned by a model, optionally trainable."""

    name: str
    value: np.ndarray
    trainable: bool = True
    partition: str = "backbone"

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)


@dataclass
class _Record:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    vjp: Callable | None
    requires_grad: bool
    param: str | None = None


@dataclass
class Graph:
    """Ordered node list plus the parameters bound into it."""

    nodes: list[_Record] = field(default_factory=list)
    params: dict[str, Parameter] = field(default_factory=dict)
    check_finite: bool = True

    def _push(self, op, inputs, value, vjp, requires_grad, param=None) -> "Node":
        value = np.asarray(value, dtype=DTYPE)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by '{op}'")
        self.nodes.append(_Record(op, tuple(inputs), value, vjp, requires_grad, param))
        return Node(self, len(self.nodes) - 1)

    def constant(self, value) -> "Node":
        return self._push("constant", (), np.array(value, dtype=DTYPE), None, False)

    def param(self, p: Parameter) -> "Node":
        if p.name in self.params and self.params[p.name] is not p:
            raise ValueError(f"duplicate parameter name '{p.name}'")
        self.params[p.name] = p
        # The graph keeps its own copy so later in-place updates cannot
        # corrupt a pending backward pass.
        return self._push("param", (), p.value.copy(), None, p.trainable, p.name)

    def op(self, name: str, inputs: Sequence["Node"], value, vjp) -> "Node":
        """Append a node. ``vjp(g, needs)`` returns one gradient per input
        (``None`` where ``needs`` is False)."""
        for x in inputs:
            if x.graph is not self:
                raise ValueError(f"{name}: operands belong to different graphs")
        req = any(self.nodes[x.index].requires_grad for x in inputs)
        return self._push(name, [x.index for x in inputs], value, vjp if req else None, req)


class Node:
    """Handle to a value recorded on a :class:`Graph`."""

    __slots__ = ("graph", "index")

    def __init__(self, graph: Graph, index: int):
        self.graph = graph
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.graph.nodes[self.index].requires_grad

    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.graph.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Node(#{self.index}, op={self.graph.nodes[self.index].op}, shape={self.shape})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return a.graph.op("add", (a, b), a.value + b.value, vjp)


def sub(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return a.graph.op("sub", (a, b), a.value - b.value, vjp)


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value

    def vjp(g, needs):
        return (_unbroadcast(g * bv, av.shape) if needs[0] else None,
                _unbroadcast(g * av, bv.shape) if needs[1] else None)

    return a.graph.op("mul", (a, b), av * bv, vjp)


def div(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g, needs):
        return (_unbroadcast(g / bv, av.shape) if needs[0] else None,
                _unbroadcast(-g * out / bv, bv.shape) if needs[1] else None)

    return a.graph.op("div", (a, b), out, vjp)


def neg(a: Node) -> Node:
    return a.graph.op("neg", (a,), -a.value, lambda g, needs: (-g,))


def square(a: Node) -> Node:
    av = a.value
    return a.graph.op("square", (a,), av * av, lambda g, needs: (2.0 * av * g,))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return a.graph.op("sqrt", (a,), out, lambda g, needs: (0.5 * g / out,))


def log(a: Node) -> Node:
    av = a.value
    return a.graph.op("log", (a,), np.log(av), lambda g, needs: (g / av,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.graph.op("exp", (a,), out, lambda g, needs: (g * out,))


def relu(a: Node) -> Node:
    mask = a.value > 0  # derivative at exactly 0 is 0
    return a.graph.op("relu", (a,), np.where(mask, a.value, 0.0), lambda g, needs: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    out = _sigmoid(a.value)
    return a.graph.op("sigmoid", (a,), out, lambda g, needs: (g * out * (1.0 - out),))


def softplus(a: Node) -> Node:
    """log(1 + e^x), evaluated without overflow."""
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return a.graph.op("softplus", (a,), out, lambda g, needs: (g * _sigmoid(x),))


def maximum0(a: Node) -> Node:
    """Hinge max(x, 0); same subgradient convention as relu."""
    return relu(a)


# --------------------------------------------------------------------------
# reductions and shape manipulation
# --------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, len(shape))
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return a.graph.op("sum", (a,), out, vjp)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    axes = _norm_axes(axis, a.value.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return a.graph.op("reshape", (a,), a.value.reshape(shape),
                      lambda g, needs: (g.reshape(old),))


def transpose(a: Node, axes) -> Node:
    inv = np.argsort(axes)
    return a.graph.op("transpose", (a,), np.transpose(a.value, axes),
                      lambda g, needs: (np.transpose(g, inv),))


def concat(xs: Sequence[Node], axis: int) -> Node:
    ndim = xs[0].value.ndim
    axis %= ndim
    for ax in range(ndim):
        if ax != axis and len({x.shape[ax] for x in xs}) > 1:
            raise ShapeError("concat", str(ax), f"sizes differ: {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g, needs):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if needs[i] else None
            for i in range(len(xs))
        )

    return xs[0].graph.op("concat", xs, np.concatenate([x.value for x in xs], axis=axis), vjp)


def getitem(a: Node, key) -> Node:
    """Basic slicing (views only; no fancy indexing)."""
    shape = a.shape

    def vjp(g, needs):
        out = np.zeros(shape, dtype=DTYPE)
        out[key] = g
        return (out,)

    return a.graph.op("getitem", (a,), a.value[key], vjp)


def take(a: Node, indices: np.ndarray) -> Node:
    """Gather rows of ``a`` (axis 0) by an integer index array of any shape."""
    indices = np.asarray(indices, dtype=np.intp)
    n = a.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise IndexError(f"take: index out of range for axis of length {n}")
    tail = a.shape[1:]

    def vjp(g, needs):
        flat = g.reshape(-1, int(np.prod(tail, dtype=int)))
        idx = indices.ravel()
        out = np.stack([np.bincount(idx, weights=flat[:, j], minlength=n)
                        for j in range(flat.shape[1])], axis=1)
        return (out.reshape((n,) + tail),)

    return a.graph.op("take", (a,), a.value[indices], vjp)


# --------------------------------------------------------------------------
# complex-linear lifting
# --------------------------------------------------------------------------

def to_complex(x: np.ndarray) -> np.ndarray:
    return x[..., 0] + 1j * x[..., 1]


def from_complex(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1)


def complex_linear(a: Node, forward: Callable[[np.ndarray], np.ndarray],
                   adjoint: Callable[[np.ndarray], np.ndarray], name: str = "complex_linear") -> Node:
    """Apply a complex-linear map to a (…, 2) real-pair tensor.

    For a real loss and z = u + jv, the pair (dL/du, dL/dv) read as a complex
    number pulls back through y = A z as A^H applied to the output pair.
    """
    out = from_complex(forward(to_complex(a.value)))

    def vjp(g, needs):
        return (from_complex(adjoint(to_complex(g))),)

    return a.graph.op(name, (a,), out, vjp)


# --------------------------------------------------------------------------
# neural-network layers
# --------------------------------------------------------------------------

def _as_batched(x: Node, op: str) -> tuple[Node, bool]:
    if x.value.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.value.ndim != 4:
        raise ShapeError(op, "input", f"expected C×H×W or N×C×H×W, got {x.shape}")
    return x, False


def _same_pads(k: int, d: int) -> tuple[int, int]:
    total = d * (k - 1)
    return total // 2, total - total // 2


def conv2d(x: Node, kernels: Node, dilation: tuple[int, int] = (1, 1)) -> Node:
    """Same-padded dilated cross-correlation.

    x: (C_in, H, W) or (N, C_in, H, W); kernels: (C_out, C_in, Kh, Kw).
    """
    x, squeeze = _as_batched(x, "conv2d")
    kv = kernels.value
    if kv.ndim != 4:
        raise ShapeError("conv2d", "kernel", f"expected 4 axes, got {kv.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kv.shape
    if kcin != cin:
        raise ShapeError("conv2d", "C_in", f"input has {cin} channels, kernel expects {kcin}")
    dh, dw = dilation
    if dh < 1 or dw < 1:
        raise ShapeError("conv2d", "dilation", f"dilation must be positive, got {dilation}")
    (pt, pb), (pl, pr) = _same_pads(kh, dh), _same_pads(kw, dw)
    xp = np.pad(x.value, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    # offsets whose window lies wholly in the zero padding contribute nothing
    taps = [(i, j) for i in range(kh) for j in range(kw)
            if i * dh < pt + h and i * dh + h > pt and j * dw < pl + w and j * dw + w > pl]

    out = np.zeros((n, cout, h * w), dtype=DTYPE)
    for i, j in taps:
        xs = xp[:, :, i * dh:i * dh + h, j * dw:j * dw + w].reshape(n, cin, h * w)
        out += np.matmul(kv[:, :, i, j], xs)
    out = out.reshape(n, cout, h, w)

    def vjp(g, needs):
        g2 = g.reshape(n, cout, h * w)
        gx = gk = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for i, j in taps:
                gxp[:, :, i * dh:i * dh + h, j * dw:j * dw + w] += \
                    np.matmul(kv[:, :, i, j].T, g2).reshape(n, cin, h, w)
            gx = gxp[:, :, pt:pt + h, pl:pl + w]
        if needs[1]:
            gk = np.zeros_like(kv)
            gt = g2.transpose(1, 0, 2).reshape(cout, -1)
            for i, j in taps:
                xs = xp[:, :, i * dh:i * dh + h, j * dw:j * dw + w]
                gk[:, :, i, j] = gt @ xs.transpose(1, 0, 2, 3).reshape(cin, -1).T
        return gx, gk

    y = x.graph.op("conv2d", (x, kernels), out, vjp)
    return reshape(y, y.shape[1:]) if squeeze else y


def depthwise_conv2d(x: Node, kernels: Node) -> Node:
    """Grouped reduction: each block of γ consecutive input channels maps to
    one output channel. kernels: (C/γ, γ, K, K)."""
    x, squeeze = _as_batched(x, "depthwise_conv2d")
    kv = kernels.value
    n, c, h, w = x.shape
    groups, gamma, kh, kw = kv.shape
    if gamma < 1 or c % gamma:
        raise ConfigurationError(f"depthwise_conv2d: C={c} is not divisible by γ={gamma}")
    if groups * gamma != c:
        raise ShapeError("depthwise_conv2d", "C", f"kernel covers {groups * gamma} channels, input has {c}")
    (pt, pb), (pl, pr) = _same_pads(kh, 1), _same_pads(kw, 1)
    xp = np.pad(x.value, ((0, 0), (0, 0), (pt, pb), (pl, pr))).reshape(n, groups, gamma, h + pt + pb, w + pl + pr)
    out = np.zeros((n, groups, h, w), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("ngchw,gc->nghw", xp[:, :, :, i:i + h, j:j + w], kv[:, :, i, j])

    def vjp(g, needs):
        gx = gk = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, :, i:i + h, j:j + w] += np.einsum("nghw,gc->ngchw", g, kv[:, :, i, j])
            gx = gxp[:, :, :, pt:pt + h, pl:pl + w].reshape(n, c, h, w)
        if needs[1]:
            gk = np.zeros_like(kv)
            for i in range(kh):
                for j in range(kw):
                    gk[:, :, i, j] = np.einsum("nghw,ngchw->gc", g, xp[:, :, :, i:i + h, j:j + w])
        return gx, gk

    y = x.graph.op("depthwise_conv2d", (x, kernels), out, vjp)
    return reshape(y, y.shape[1:]) if squeeze else y


def pointwise_conv2d(x: Node, kernels: Node) -> Node:
    """1×1 convolution: per-pixel linear map across channels."""
    x, squeeze = _as_batched(x, "pointwise_conv2d")
    kv = kernels.value
    n, cin, h, w = x.shape
    if kv.ndim != 4 or kv.shape[2:] != (1, 1):
        raise ShapeError("pointwise_conv2d", "kernel", f"expected C_out×C_in×1×1, got {kv.shape}")
    if kv.shape[1] != cin:
        raise ShapeError("pointwise_conv2d", "C_in", f"input has {cin} channels, kernel expects {kv.shape[1]}")
    k2 = kv[:, :, 0, 0]
    xv = x.value.reshape(n, cin, h * w)
    out = np.matmul(k2, xv).reshape(n, -1, h, w)

    def vjp(g, needs):
        g2 = g.reshape(n, -1, h * w)
        gx = np.matmul(k2.T, g2).reshape(n, cin, h, w) if needs[0] else None
        gk = None
        if needs[1]:
            gk = (g2.transpose(1, 0, 2).reshape(k2.shape[0], -1)
                  @ xv.transpose(1, 0, 2).reshape(cin, -1).T)[:, :, None, None]
        return gx, gk

    y = x.graph.op("pointwise_conv2d", (x, kernels), out, vjp)
    return reshape(y, y.shape[1:]) if squeeze else y


def dense(x: Node, weights: Node, bias: Node) -> Node:
    """Affine map over the last axis: x @ W^T + b with W of shape (M, N)."""
    wv, xv = weights.value, x.value
    if wv.ndim != 2 or wv.shape[1] != xv.shape[-1]:
        raise ShapeError("dense", "N", f"input width {xv.shape[-1]} vs weights {wv.shape}")
    if bias.shape != (wv.shape[0],):
        raise ShapeError("dense", "M", f"bias {bias.shape} vs weights {wv.shape}")
    out = xv @ wv.T + bias.value

    def vjp(g, needs):
        g2 = g.reshape(-1, wv.shape[0])
        return (g @ wv if needs[0] else None,
                g2.T @ xv.reshape(-1, wv.shape[1]) if needs[1] else None,
                g2.sum(axis=0) if needs[2] else None)

    return x.graph.op("dense", (x, weights, bias), out, vjp)


def layer_norm(x: Node, scale: Node, offset: Node, eps: float = 1e-5) -> Node:
    """Normalize each example jointly over (C, H, W), then apply per-channel
    scale and offset."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x, squeeze = _as_batched(x, "layer_norm")
    n, c = x.shape[:2]
    if scale.shape != (c,) or offset.shape != (c,):
        raise ShapeError("layer_norm", "C", f"scale/offset must have shape ({c},)")
    xv = x.value
    mu = xv.mean(axis=(1, 2, 3), keepdims=True)
    var = xv.var(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    s = scale.value[None, :, None, None]
    out = xhat * s + offset.value[None, :, None, None]

    def vjp(g, needs):
        gx = gs = go = None
        if needs[0]:
            gh = g * s
            gx = inv * (gh - gh.mean(axis=(1, 2, 3), keepdims=True)
                        - xhat * (gh * xhat).mean(axis=(1, 2, 3), keepdims=True))
        if needs[1]:
            gs = (g * xhat).sum(axis=(0, 2, 3))
        if needs[2]:
            go = g.sum(axis=(0, 2, 3))
        return gx, gs, go

    y = x.graph.op("layer_norm", (x, scale, offset), out, vjp)
    return reshape(y, y.shape[1:]) if squeeze else y


# --------------------------------------------------------------------------
# reverse sweep
# --------------------------------------------------------------------------

def backward(graph: Graph, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable parameter on the
    graph. Frozen parameters get no entry."""
    if loss.graph is not graph:
        raise ValueError("backward: loss node belongs to another graph")
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    nodes = graph.nodes
    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(nodes[loss.index].value)
    for idx in range(loss.index, -1, -1):
        rec = nodes[idx]
        g = grads[idx]
        if g is None or rec.vjp is None:
            continue
        needs = tuple(nodes[i].requires_grad for i in rec.inputs)
        for i, gi in zip(rec.inputs, rec.vjp(g, needs)):
            if gi is None or not nodes[i].requires_grad:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi
        if idx != loss.index:
            grads[idx] = None  # free intermediate gradients early
    out: dict[str, np.ndarray] = {}
    for idx, rec in enumerate(nodes[:loss.index + 1]):
        if rec.op == "param" and rec.requires_grad:
            g = np.zeros_like(rec.value) if grads[idx] is None else np.asarray(grads[idx], dtype=DTYPE)
            # a parameter bound more than once accumulates over its uses
            out[rec.param] = out[rec.param] + g if rec.param in out else g
    # parameters bound after the loss cannot influence it
    for idx, rec in enumerate(nodes[loss.index + 1:], start=loss.index + 1):
        if rec.op == "param" and rec.requires_grad:
            out.setdefault(rec.param, np.zeros_like(rec.value))
    return out
