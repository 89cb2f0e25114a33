"""Dense NCHW tensors with tape-free reverse-mode differentiation.

Every differentiable op builds its output through ``_node`` which records the
parent tensors and a closure mapping the output gradient to one gradient per
parent.  A closure may return ``None`` (no gradient), a full array, or a
``Region`` (gradient that only covers ``parent[index]``).  Regions let sliced
supernet weights accumulate straight into the parameter buffer and mark which
elements were touched, which the optimizer uses for update locality.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .errors import DimensionError, MissingCalibrationError, RankError

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class Region:
    index: tuple
    grad: np.ndarray


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "grad_mask", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.grad_mask: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None
        self.grad_mask = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1 or self.ndim > 1:
            raise RankError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _accumulate_leaf(node, g, None)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                index = None
                if isinstance(pg, Region):
                    index, pg = pg.index, pg.grad
                if parent._backward is None:
                    _accumulate_leaf(parent, pg, index)
                    continue
                if index is not None:
                    full = np.zeros_like(parent.data)
                    full[index] += pg
                    pg = full
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __getitem__(self, index):
        return take(self, index)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tsum(self) / self.data.size

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate_leaf(leaf: Tensor, g: np.ndarray, index) -> None:
    if leaf.grad is None:
        leaf.grad = np.zeros_like(leaf.data)
        leaf.grad_mask = np.zeros(leaf.data.shape, dtype=bool)
    if index is None:
        leaf.grad += g
        leaf.grad_mask[...] = True
    else:
        leaf.grad[index] += g
        leaf.grad_mask[index] = True


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise & structural ops -------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _node(a.data.reshape(shape), (a,), backward)


def take(a: Tensor, index) -> Tensor:
    """Basic-slicing view; the gradient flows back as a ``Region``."""
    if not isinstance(index, tuple):
        index = (index,)

    def backward(g):
        return (Region(index, g),)

    return _node(a.data[index], (a,), backward)


def relu(x: Tensor) -> Tensor:
    def backward(g):
        return (g * (x.data > 0),)

    return _node(np.maximum(x.data, 0), (x,), backward)


@njit(cache=True, fastmath=True)
def _hswish_fwd(d, out):
    for i in range(d.size):
        v = d[i]
        t = min(max(v + 3.0, 0.0), 6.0)
        out[i] = v * t / 6.0


@njit(cache=True, fastmath=True)
def _hswish_bwd(d, g, out):
    for i in range(d.size):
        v = d[i]
        if v < -3.0:
            out[i] = 0.0
        elif v > 3.0:
            out[i] = g[i]
        else:
            out[i] = g[i] * (2.0 * v + 3.0) / 6.0


def hardswish(x: Tensor) -> Tensor:
    d = np.ascontiguousarray(x.data)
    out = np.empty_like(d)
    _hswish_fwd(d.reshape(-1), out.reshape(-1))

    def backward(g):
        gx = np.empty_like(d)
        _hswish_bwd(d.reshape(-1), np.ascontiguousarray(g).reshape(-1), gx.reshape(-1))
        return (gx,)

    return _node(out, (x,), backward)


ACTIVATIONS = {"hswish": hardswish, "relu": relu}


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _node(out, parents, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return _node(x.data.mean(axis=(2, 3)), (x,), backward)


# -- convolution ----------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _dw_forward(xp, w, stride, out):  # NHWC input, (k, k, C) weight
    n_, ho, wo, c_ = out.shape
    k = w.shape[0]
    for n in range(n_):
        for oh in range(ho):
            for ow in range(wo):
                for i in range(k):
                    ih = oh * stride + i
                    for j in range(k):
                        iw = ow * stride + j
                        for c in range(c_):
                            out[n, oh, ow, c] += xp[n, ih, iw, c] * w[i, j, c]


@njit(cache=True, fastmath=True)
def _dw_backward(xp, w, g, stride, gxp, gw):
    n_, ho, wo, c_ = g.shape
    k = w.shape[0]
    for n in range(n_):
        for oh in range(ho):
            for ow in range(wo):
                for i in range(k):
                    ih = oh * stride + i
                    for j in range(k):
                        iw = ow * stride + j
                        for c in range(c_):
                            gv = g[n, oh, ow, c]
                            gxp[n, ih, iw, c] += gv * w[i, j, c]
                            gw[i, j, c] += gv * xp[n, ih, iw, c]


def _window(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _pad_hw(a: np.ndarray, p: int, axes=(2, 3)) -> np.ndarray:
    if not p:
        return a
    width = [(0, 0)] * a.ndim
    for ax in axes:
        width[ax] = (p, p)
    return np.pad(a, width)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation on NCHW input with OIkk weights.

    Three kernels: 1x1 dense as a batched matmul, k x k dense via im2col, and
    depthwise (groups == C) through a compiled NHWC loop. Other group counts
    fall back to one dense convolution per group.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d wants NCHW input and OIkk weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups or o % groups:
        raise DimensionError(f"conv2d: channels C={c} / O={o} not divisible by groups={groups}")
    if cg != c // groups:
        raise DimensionError(f"conv2d: weight axis 1 (in/groups)={cg} but input axis 1 (C)={c} / groups={groups}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel axes 2,3 must be equal and odd, got {kh}x{kw}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: spatial axes 2,3 ({h}x{w}) too small for kernel {kh}")
    xd, wd = x.data, weight.data
    if groups == 1:
        fwd, bwd = _dense_conv(xd, wd, stride, padding, ho, wo)
    elif groups == c and o == c:
        fwd, bwd = _depthwise_conv(xd, wd, stride, padding, ho, wo)
    else:
        fwd, bwd = _grouped_conv(xd, wd, stride, padding, groups)

    def backward(g):
        return bwd(g, x.requires_grad, weight.requires_grad)

    return _node(fwd, (x, weight), backward)


def _dense_conv(xd, wd, stride, padding, ho, wo):
    n, c, h, w = xd.shape
    o, _, k, _ = wd.shape
    if k == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = xs.reshape(n, c, ho * wo)
        w2 = wd.reshape(o, c)
    else:
        xp = _pad_hw(xd, padding)
        cols = np.empty((n, c, k, k, ho, wo), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = _window(xp, i, j, stride, ho, wo)
        cols = cols.reshape(n, c * k * k, ho * wo)
        w2 = wd.reshape(o, c * k * k)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)

    def bwd(g, need_x, need_w):
        g2 = g.reshape(n, o, ho * wo)
        gw = gx = None
        if need_w:
            gw = np.einsum("nop,nqp->oq", g2, cols, optimize=True).reshape(wd.shape)
        if need_x:
            gcols = np.matmul(w2.T, g2)
            if k == 1 and padding == 0:
                gcols = gcols.reshape(n, c, ho, wo)
                if stride > 1:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride] = gcols
                else:
                    gx = gcols
            else:
                gcols = gcols.reshape(n, c, k, k, ho, wo)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
                for i in range(k):
                    for j in range(k):
                        _window(gxp, i, j, stride, ho, wo)[...] += gcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw

    return out, bwd


def _depthwise_conv(xd, wd, stride, padding, ho, wo):
    n, c, h, w = xd.shape
    k = wd.shape[-1]
    xp = _pad_hw(np.ascontiguousarray(xd.transpose(0, 2, 3, 1)), padding, axes=(1, 2))
    wt = np.ascontiguousarray(wd[:, 0].transpose(1, 2, 0))
    out = np.zeros((n, ho, wo, c), dtype=xd.dtype)
    _dw_forward(xp, wt, stride, out)

    def bwd(g, need_x, need_w):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gxp = np.zeros_like(xp)
        gwt = np.zeros_like(wt)
        _dw_backward(xp, wt, gt, stride, gxp, gwt)
        gx = gw = None
        if need_x:
            core = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(core.transpose(0, 3, 1, 2))
        if need_w:
            gw = gwt.transpose(2, 0, 1)[:, None].copy()
        return gx, gw

    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), bwd


def _grouped_conv(xd, wd, stride, padding, groups):
    c = xd.shape[1]
    o = wd.shape[0]
    cg, og = c // groups, o // groups
    parts = []
    for gi in range(groups):
        ho = (xd.shape[2] + 2 * padding - wd.shape[2]) // stride + 1
        wo = (xd.shape[3] + 2 * padding - wd.shape[3]) // stride + 1
        parts.append(_dense_conv(np.ascontiguousarray(xd[:, gi * cg:(gi + 1) * cg]),
                                 np.ascontiguousarray(wd[gi * og:(gi + 1) * og]), stride, padding, ho, wo))
    out = np.concatenate([p[0] for p in parts], axis=1)

    def bwd(g, need_x, need_w):
        gx = np.zeros_like(xd) if need_x else None
        gw = np.zeros_like(wd) if need_w else None
        for gi, (_, b) in enumerate(parts):
            px, pw = b(np.ascontiguousarray(g[:, gi * og:(gi + 1) * og]), need_x, need_w)
            if need_x:
                gx[:, gi * cg:(gi + 1) * cg] = px
            if need_w:
                gw[gi * og:(gi + 1) * og] = pw
        return gx, gw

    return out, bwd


# -- normalization ----------------------------------------------------------------

@njit(cache=True)
def _channel_stats(x3):
    n_, c_, p_ = x3.shape
    mean = np.zeros(c_)
    var = np.zeros(c_)
    m = n_ * p_
    for c in range(c_):
        s = 0.0
        for n in range(n_):
            for p in range(p_):
                s += x3[n, c, p]
        mu = s / m
        q = 0.0
        for n in range(n_):
            for p in range(p_):
                d = x3[n, c, p] - mu
                q += d * d
        mean[c] = mu
        var[c] = q / m
    return mean, var


@njit(cache=True, fastmath=True)
def _affine_norm(x3, mean, inv, scale, shift, xhat, out):
    n_, c_, p_ = x3.shape
    for n in range(n_):
        for c in range(c_):
            mu, iv, sc, sh = mean[c], inv[c], scale[c], shift[c]
            for p in range(p_):
                h = (x3[n, c, p] - mu) * iv
                xhat[n, c, p] = h
                out[n, c, p] = h * sc + sh


@njit(cache=True, fastmath=True)
def _norm_backward(g3, xhat, inv, scale, batch_stats, gx, gscale, gshift):
    n_, c_, p_ = g3.shape
    m = n_ * p_
    for c in range(c_):
        s1 = 0.0
        s2 = 0.0
        for n in range(n_):
            for p in range(p_):
                gv = g3[n, c, p]
                s1 += gv
                s2 += gv * xhat[n, c, p]
        gshift[c] = s1
        gscale[c] = s2
        k = scale[c] * inv[c]
        if batch_stats:
            a1 = s1 / m
            a2 = s2 / m
            for n in range(n_):
                for p in range(p_):
                    gx[n, c, p] = k * (g3[n, c, p] - a1 - xhat[n, c, p] * a2)
        else:
            for n in range(n_):
                for p in range(p_):
                    gx[n, c, p] = k * g3[n, c, p]


def normalize_batch(x: Tensor, scale: Tensor, shift: Tensor, mode: str = "train",
                    calib_stats: tuple[np.ndarray, np.ndarray] | None = None,
                    eps: float = BN_EPS, stats_out: list | None = None) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    ``train`` uses the statistics of ``x`` itself (and appends them to
    ``stats_out`` when given); ``eval`` uses ``calib_stats`` = (mean, var).
    """
    if x.ndim != 4:
        raise DimensionError(f"normalize_batch wants NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"normalize_batch: scale/shift {scale.shape}/{shift.shape} vs channels {c}")
    dt = x.dtype
    x3 = np.ascontiguousarray(x.data).reshape(n, c, h * w)
    if mode == "train":
        mean, var = _channel_stats(x3)
        if stats_out is not None:
            stats_out.append((mean.astype(dt), var.astype(dt)))
    elif mode == "eval":
        if calib_stats is None:
            raise MissingCalibrationError("normalize_batch in eval mode needs calibration statistics")
        mean, var = (np.asarray(s, dtype=np.float64) for s in calib_stats)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(x3)
    out = np.empty_like(x3)
    _affine_norm(x3, mean.astype(dt), inv.astype(dt), scale.data, shift.data, xhat, out)
    batch_stats = mode == "train"

    def backward(g):
        gx = np.empty_like(x3)
        gscale = np.empty_like(scale.data)
        gshift = np.empty_like(shift.data)
        _norm_backward(np.ascontiguousarray(g).reshape(n, c, h * w), xhat, inv.astype(dt),
                       scale.data, batch_stats, gx, gscale, gshift)
        return (gx.reshape(n, c, h, w) if x.requires_grad else None,
                gscale if scale.requires_grad else None,
                gshift if shift.requires_grad else None)

    return _node(out.reshape(n, c, h, w), (x, scale, shift), backward)


# -- losses -------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_from_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """-log softmax(logits)[target]; ``targets`` are class indices or one-hot rows."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects N x K logits, got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise DimensionError("cross_entropy needs at least two classes")
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise DimensionError(f"cross_entropy: {t.shape[0]} targets for {n} rows")
        if t.size and (t.min() < 0 or t.max() >= k):
            raise IndexError(f"cross_entropy: target index out of range [0, {k})")
        onehot = np.zeros((n, k), dtype=logits.dtype)
        onehot[np.arange(n), t.astype(np.int64)] = 1.0
    else:
        if t.shape != (n, k):
            raise DimensionError(f"cross_entropy: target shape {t.shape} vs logits {logits.shape}")
        onehot = t.astype(logits.dtype)
    logp = log_softmax(logits.data)
    rows = -(onehot * logp).sum(axis=1)
    probs = np.exp(logp)

    if reduction == "none":
        def backward(g):
            return (g[:, None] * (probs * onehot.sum(axis=1, keepdims=True) - onehot),)

        return _node(rows, (logits,), backward)
    if reduction == "mean":
        def backward(g):
            return ((g / n) * (probs * onehot.sum(axis=1, keepdims=True) - onehot),)

        return _node(np.asarray(rows.mean(), dtype=logits.dtype), (logits,), backward)
    raise ValueError(f"unknown reduction {reduction!r}")
