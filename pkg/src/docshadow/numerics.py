"""Minimal dense-tensor engine with reverse-mode autodiff and Adam.

Tensors wrap numpy arrays. Every differentiable op records its parents and
a vector-Jacobian closure on the implicit tape (the node graph); backward()
walks the graph in reverse topological order and accumulates gradients
additively into ``.grad`` of every tensor with ``requires_grad``.

Training runs in float32; tests flip to float64 via ``precision("float64")``
so finite-difference checks stay tight.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class UsageError(RuntimeError):
    """Raised on API misuse (e.g. backward from a non-scalar)."""


_DEFAULT_DTYPE = np.float32
_CHECK_FINITE = False


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(name: str):
    """Temporarily switch the default dtype ('float32' or 'float64')."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(name)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextmanager
def debug_finite_checks():
    """Raise on any NaN/Inf produced by an op while active."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = True
    try:
        yield
    finally:
        _CHECK_FINITE = old


def _maybe_check(arr: np.ndarray) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced")
    return arr


class Tensor:
    """A dense array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- graph plumbing ------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Gradients sum into ``.grad`` of every reachable tensor with
        ``requires_grad``; fan-out accumulates additively.
        """
        if self.size != 1:
            raise UsageError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node._accumulate(g)
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in flowing:
                    flowing[id(p)] = flowing[id(p)] + pg
                else:
                    flowing[id(p)] = pg

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return tabs(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(_maybe_check(data))
    needs = tuple(p for p in parents)
    if any(p.requires_grad for p in needs):
        out.requires_grad = True
        out._parents = needs
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and reduction ops -------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), vjp)


def tabs(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.abs(x.data)

    def vjp(g):
        return (g * np.sign(x.data),)

    return _make(out, (x,), vjp)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    out = np.clip(x.data, lo, hi)

    def vjp(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return _make(out, (x,), vjp)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    if axis is None:
        count = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for a in ax:
            count *= x.shape[a]
    s = tsum(x, axis, keepdims)
    return mul(s, 1.0 / count)


# -- shape ops ----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    x = _wrap(x)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), vjp)


def getitem(x: Tensor, key) -> Tensor:
    x = _wrap(x)
    out = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(out, copy=True), (x,), vjp)


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    out = np.broadcast_to(x.data, shape).copy()

    def vjp(g):
        return (_unbroadcast(g, x.shape),)

    return _make(out, (x,), vjp)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup table[idx]; backward scatter-adds into the table."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), vjp)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul needs at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    # promote 1-d operands so the vjp can treat everything as stacked 2-d
    ad = a.data[None, :] if a.ndim == 1 else a.data
    bd = b.data[:, None] if b.ndim == 1 else b.data
    out2 = ad @ bd
    out = out2
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0] if a.ndim > 1 else out[..., 0]

    def vjp(g):
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2) if b.ndim > 1 else g2.reshape(1, 1)
        elif b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g2
        if a.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + (ga.shape[-1],))
        if b.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.ascontiguousarray(out), (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; slices sum to 1."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), vjp)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layernorm gain/bias must match the last extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (dxhat - m1 - xhat * m2) * inv
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red)
        gbias = g.sum(axis=red)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), vjp)


# -- convolution ----------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (c, kh, kw, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride)
    )


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of a C,H,W map with O,C,kh,kw kernels."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError("conv2d expects x: C,H,W and w: O,C,kh,kw")
    c, h, wd = x.shape
    o, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel extents must be odd")
    if (h + 2 * padding - kh) % stride or (wd + 2 * padding - kw) % stride:
        raise ShapeError(
            f"conv2d geometry not divisible by stride {stride}: "
            f"input {h}x{wd}, kernel {kh}x{kw}, padding {padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(w.data, cols, axes=([1, 2, 3], [0, 1, 2]))
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        if b.shape != (o,):
            raise ShapeError("conv2d bias must have one entry per output channel")
        out = out + b.data[:, None, None]
        parents.append(b)

    def vjp(g):
        gw = np.tensordot(g, cols, axes=([1, 2], [3, 4]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    np.tensordot(w.data[:, :, i, j], g, axes=([0], [0]))
        gx = gxp[:, padding:padding + h, padding:padding + wd] if padding else gxp
        if b is not None:
            return gx, gw, g.sum(axis=(1, 2))
        return gx, gw

    return _make(out, tuple(parents), vjp)


def gap(x: Tensor) -> Tensor:
    """Global average pooling: per-channel spatial mean of a C,H,W map."""
    x = _wrap(x)
    if x.ndim != 3:
        raise ShapeError("gap expects a C,H,W tensor")
    return tmean(x, axis=(1, 2))


# -- resampling (linear maps along both spatial axes) ---------------------------

_LINMAP_CACHE: dict = {}


def _bilinear_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    key = ("bilin", n_out, n_in, np.dtype(dtype).str)
    m = _LINMAP_CACHE.get(key)
    if m is None:
        m = np.zeros((n_out, n_in), dtype=np.float64)
        if n_in == 1:
            m[:, 0] = 1.0
        else:
            src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
            src = np.clip(src, 0.0, n_in - 1.0)
            i0 = np.floor(src).astype(int)
            i1 = np.minimum(i0 + 1, n_in - 1)
            t = src - i0
            m[np.arange(n_out), i0] += 1.0 - t
            m[np.arange(n_out), i1] += t
        m = m.astype(dtype)
        _LINMAP_CACHE[key] = m
    return m


def _avgpool_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    key = ("pool", n_out, n_in, np.dtype(dtype).str)
    m = _LINMAP_CACHE.get(key)
    if m is None:
        m = np.zeros((n_out, n_in), dtype=np.float64)
        for i in range(n_out):
            a = (i * n_in) // n_out
            b = -(-((i + 1) * n_in) // n_out)  # ceil
            m[i, a:b] = 1.0 / (b - a)
        m = m.astype(dtype)
        _LINMAP_CACHE[key] = m
    return m


def _linmap2d(x: Tensor, wr: np.ndarray, wc: np.ndarray) -> Tensor:
    x = _wrap(x)
    tmp = np.tensordot(x.data, wr, axes=([1], [1]))       # c,w,R
    out = np.tensordot(tmp, wc, axes=([1], [1]))          # c,R,S

    def vjp(g):
        t = np.tensordot(g, wr, axes=([1], [0]))          # c,S,h
        return (np.tensordot(t, wc, axes=([1], [0])),)    # c,h,w

    return _make(out, (x,), vjp)


def resize_bilinear(x: Tensor, h: int, w: int) -> Tensor:
    """Bilinear resize of a C,H,W map; rows of the kernel sum to 1."""
    x = _wrap(x)
    if x.ndim != 3:
        raise ShapeError("resize_bilinear expects a C,H,W tensor")
    if x.shape[1:] == (h, w):
        return x
    wr = _bilinear_matrix(h, x.shape[1], x.dtype)
    wc = _bilinear_matrix(w, x.shape[2], x.dtype)
    return _linmap2d(x, wr, wc)


def adaptive_avgpool(x: Tensor, grid_h: int, grid_w: Optional[int] = None) -> Tensor:
    """Average-pool a C,H,W map onto a grid_h×grid_w partition."""
    x = _wrap(x)
    if x.ndim != 3:
        raise ShapeError("adaptive_avgpool expects a C,H,W tensor")
    wr = _avgpool_matrix(grid_h, x.shape[1], x.dtype)
    wc = _avgpool_matrix(grid_w or grid_h, x.shape[2], x.dtype)
    return _linmap2d(x, wr, wc)


# -- optimizer -------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError("adam: gradient/parameter shape mismatch")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    """Gaussian init scaled for relu fan-in."""
    scale = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * scale).astype(dtype or _DEFAULT_DTYPE)
