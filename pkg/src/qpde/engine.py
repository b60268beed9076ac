"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays, float32 by default (float64 is used when the
caller hands in 64-bit arrays, which the test suite does for gradient
checks). Ops never mutate their inputs; each op returns a fresh tensor that
records a backward closure and its parents, and ``backward`` on a scalar
loss walks that graph once in reverse topological order.

Reductions accumulate in float64 regardless of the storage dtype so loss
values stay stable across op orderings.

Multiplication-bearing ops (matmul, conv1d and the spectral ops defined in
``spectral``) report their operation counts to any active ``OpCounter`` so
the cost model can cross-check its static plan against an executed forward
pass.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, UsageError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_counters: list["OpCounter"] = []


class OpCounter:
    """Tally of multiply/add counts for priced ops executed under count_ops."""

    def __init__(self):
        self.mults = 0
        self.adds = 0
        self.by_kind: dict[str, list[int]] = {}
        self.events: list[tuple[str, int, int]] = []

    def record(self, kind: str, m: int, a: int) -> None:
        self.mults += m
        self.adds += a
        entry = self.by_kind.setdefault(kind, [0, 0])
        entry[0] += m
        entry[1] += a
        self.events.append((kind, m, a))

    def kind_mults(self, kind: str) -> int:
        return self.by_kind.get(kind, [0, 0])[0]

    def kind_events(self, kind: str) -> int:
        return sum(1 for k, _, _ in self.events if k == kind)


@contextmanager
def count_ops(counter: OpCounter):
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _record(kind: str, m: int, a: int) -> None:
    for c in _counters:
        c.record(kind, m, a)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / detached rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise UsageError("wrap raw array data, not another Tensor")
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self):
        backward(self)


def _scalar_err():
    raise UsageError("item() expects a single-element tensor")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x) and like is not None:
        return Tensor(np.asarray(x, dtype=like.data.dtype))
    return Tensor(x)


def op_node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create a graph node; prunes the graph when gradients are off/unneeded."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from a scalar loss."""
    if loss.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    # Iterative topological sort; training graphs can be hundreds of nodes deep.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- broadcasting helpers ----------------------------------------------------

def _check_broadcast(a_shape, b_shape, out_shape):
    # One operand must broadcast to the other; no mutual expansion.
    if out_shape != a_shape and out_shape != b_shape:
        raise DimensionError(f"shapes {a_shape} and {b_shape} do not line up")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops ---------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    data = a.data + b.data
    _check_broadcast(a.shape, b.shape, data.shape)

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(g, b.shape))

    return op_node(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    data = a.data - b.data
    _check_broadcast(a.shape, b.shape, data.shape)

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(-g, b.shape))

    return op_node(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    data = a.data * b.data
    _check_broadcast(a.shape, b.shape, data.shape)

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(g * a.data, b.shape))

    return op_node(data, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, -g)

    return op_node(-a.data, (a,), bw)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a float exponent (domain is the caller's business)."""
    a = _wrap(a)
    data = a.data ** p

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, g * p * a.data ** (p - 1.0))

    return op_node(data, (a,), bw)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, g * mask)

    return op_node(a.data * mask, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh form:
    0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
    """
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bw(g):
        if a.requires_grad:
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            accumulate_grad(a, g * d)

    return op_node(data, (a,), bw)


def tanh(a) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, g * (1.0 - t * t))

    return op_node(t, (a,), bw)


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            accumulate_grad(a, np.broadcast_to(g.reshape((1,) * a.ndim), a.shape))
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        gk = g if keepdims else np.expand_dims(g, axes)
        accumulate_grad(a, np.broadcast_to(gk, a.shape))

    return op_node(data, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _wrap(a)
    b = _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _record("matmul", m * k * n, m * k * n)
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, g @ b.data.T)
        if b.requires_grad:
            accumulate_grad(b, a.data.T @ g)

    return op_node(data, (a, b), bw)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           padding: str = "zero", stride: int = 1) -> Tensor:
    """Same-length 1-D convolution (cross-correlation) with odd kernels.

    x: [C_in, N] or [B, C_in, N]; w: [C_out, C_in, K]; padding in {zero, circular}.
    With stride s the output length is N // s (N must be divisible by s).
    """
    x = _wrap(x)
    w = _wrap(w)
    if w.ndim != 3:
        raise DimensionError(f"kernel must be [C_out, C_in, K], got {w.shape}")
    out_ch, in_ch, k = w.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d kernel size must be odd, got {k}")
    if padding not in ("zero", "circular"):
        raise ConfigurationError(f"unknown padding mode {padding!r}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[1] != in_ch:
        raise DimensionError(f"input {x.shape} does not match kernel {w.shape}")
    b_sz, _, n = xd.shape
    if n % stride != 0:
        raise ConfigurationError(f"length {n} not divisible by stride {stride}")
    p = k // 2
    if p:
        if padding == "zero":
            xp = np.pad(xd, ((0, 0), (0, 0), (p, p)))
        else:
            xp = np.concatenate([xd[..., n - p:], xd, xd[..., :p]], axis=-1)
    else:
        xp = xd
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # [B, C_in, N_out, K]
    n_out = win.shape[2]
    data = np.einsum("ock,bcnk->bon", w.data, win, optimize=True)
    if bias is not None:
        data = data + bias.data[:, None]
    m_cnt = b_sz * out_ch * in_ch * k * n_out
    a_cnt = m_cnt if bias is not None else m_cnt - b_sz * out_ch * n_out
    _record("conv", m_cnt, a_cnt)

    def bw(g):
        gb = g[None] if squeeze and g.ndim == 2 else g
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, gb.sum(axis=(0, 2)))
        if w.requires_grad:
            accumulate_grad(w, np.einsum("bon,bcnk->ock", gb, win, optimize=True))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for kk in range(k):
                contrib = np.einsum("oc,bon->bcn", w.data[:, :, kk], gb, optimize=True)
                gxp[:, :, kk: kk + stride * n_out: stride] += contrib
            if p:
                gx = gxp[:, :, p: p + n].copy()
                if padding == "circular":
                    gx[..., n - p:] += gxp[:, :, :p]
                    gx[..., :p] += gxp[:, :, p + n:]
            else:
                gx = gxp
            accumulate_grad(x, gx[0] if squeeze else gx)

    parents = (x, w) if bias is None else (x, w, bias)
    out = op_node(data, parents, bw)
    if squeeze:
        out = reshape(out, data.shape[1:]) if out.requires_grad else Tensor(data[0])
    return out


# -- structural ops -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, g.reshape(a.shape))

    return op_node(data, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, g.transpose(inv))

    return op_node(a.data.transpose(axes), (a,), bw)


def concat(tensors, axis: int) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                accumulate_grad(t, g[tuple(idx)])

    return op_node(data, tuple(ts), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    a = _wrap(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[idx] = g
            accumulate_grad(a, ga)

    return op_node(a.data[idx], (a,), bw)


def pad_axis(a: Tensor, axis: int, new_len: int, start: int = 0) -> Tensor:
    """Embed ``a`` into a zero tensor whose ``axis`` has length ``new_len``."""
    a = _wrap(a)
    axis = axis % a.ndim
    if start + a.shape[axis] > new_len:
        raise DimensionError("padded axis shorter than the content placed into it")
    shape = list(a.shape)
    shape[axis] = new_len
    data = np.zeros(shape, dtype=a.data.dtype)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + a.shape[axis])
    idx = tuple(idx)
    data[idx] = a.data

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, g[idx])

    return op_node(data, (a,), bw)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Repeat each sample ``factor`` times along the last axis."""
    a = _wrap(a)
    data = np.repeat(a.data, factor, axis=-1)

    def bw(g):
        if a.requires_grad:
            accumulate_grad(a, g.reshape(a.shape + (factor,)).sum(axis=-1))

    return op_node(data, (a,), bw)


# -- composite normalization ---------------------------------------------------

def group_norm(x: Tensor, num_groups: int, weight: Tensor | None = None,
               bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Group normalization over [B?, C, N]; constant input maps to zeros (pre-affine)."""
    x = _wrap(x)
    squeeze = x.ndim == 2
    xb = reshape(x, (1,) + x.shape) if squeeze else x
    b, c, n = xb.shape
    if c % num_groups:
        raise ConfigurationError(f"{c} channels not divisible into {num_groups} groups")
    xg = reshape(xb, (b, num_groups, (c // num_groups) * n))
    mu = mean(xg, axis=2, keepdims=True)
    xc = sub(xg, mu)
    var = mean(mul(xc, xc), axis=2, keepdims=True)
    y = mul(xc, power(add(var, eps), -0.5))
    y = reshape(y, (b, c, n))
    if weight is not None:
        y = mul(y, reshape(weight, (c, 1)))
    if bias is not None:
        y = add(y, reshape(bias, (c, 1)))
    return reshape(y, (c, n)) if squeeze else y
