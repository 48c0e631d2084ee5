"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`.  When gradients are enabled and
at least one input requires them, the output keeps references to its inputs and
a closure that maps the upstream gradient to input gradients.  ``backward``
sorts that graph topologically into a :class:`Tape`, replays it in reverse and
releases each node as soon as its gradient has been propagated.

An :class:`AllocationMeter` can be activated to track live tensor payload bytes
(data, saved intermediates and gradients) and their high-water mark.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "AllocationMeter",
    "ShapeError",
    "GradientError",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "is_grad_enabled",
    "precision",
    "get_default_dtype",
    "elementwise_add",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "conv2d",
    "softmax",
    "layer_norm",
    "pool2d",
    "pointwise_apply",
    "relu",
    "gelu",
    "sigmoid",
    "attention",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "sparse_matmul",
    "tensor_sum",
    "tensor_mean",
    "upsample_nearest",
    "cross_entropy",
    "bce_with_logits",
    "smooth_l1",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GradientError(RuntimeError):
    """``backward`` or ``grad_check`` was called on an unsuitable output."""


# ---------------------------------------------------------------------------
# global state: precision, grad mode, active meter

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_meter: "AllocationMeter | None" = None


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (e.g. ``np.float64``)."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class AllocationMeter:
    """Counts live tensor payload bytes and their high-water mark.

    Only memory owned by tensors is counted: forward data, intermediates saved
    for backward, and gradient buffers.  Optimizer moments and numpy
    temporaries inside an op are not.
    """

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current

    def free(self, nbytes: int) -> None:
        self.current -= nbytes

    def __enter__(self) -> "AllocationMeter":
        global _meter
        if _meter is not None:
            raise RuntimeError("nested allocation metering is not supported")
        _meter = self
        return self

    def __exit__(self, *exc) -> None:
        global _meter
        _meter = None


def active_meter() -> "AllocationMeter | None":
    return _meter


class _Saved:
    """Holds an array kept alive for backward and meters its bytes."""

    __slots__ = ("a", "_meter")

    def __init__(self, a: np.ndarray) -> None:
        self.a = a
        self._meter = _meter
        if _meter is not None:
            _meter.alloc(a.nbytes)

    def __del__(self) -> None:
        if self._meter is not None and self._meter is _meter:
            self._meter.free(self.a.nbytes)


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    __slots__ = (
        "data",
        "requires_grad",
        "_grad",
        "_grad_meter",
        "_parents",
        "_backward",
        "op",
        "_meter",
        "__weakref__",
    )

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        if dtype is None:
            dtype = _default_dtype
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._grad_meter = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self._meter = _meter
        if _meter is not None:
            _meter.alloc(arr.nbytes)

    def __del__(self) -> None:
        m = getattr(self, "_meter", None)
        if m is not None and m is _meter:
            m.free(self.data.nbytes)
        if getattr(self, "_grad", None) is not None:
            self.grad = None

    # gradient storage is metered like data
    @property
    def grad(self) -> np.ndarray | None:
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        if self._grad is not None and self._grad_meter is not None and self._grad_meter is _meter:
            self._grad_meter.free(self._grad.nbytes)
        self._grad = value
        self._grad_meter = _meter
        if value is not None and _meter is not None:
            _meter.alloc(value.nbytes)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None) -> None:
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    else:
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """Strict same-shape addition."""
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_add shape mismatch: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add(a, b) -> Tensor:
    """Broadcasting addition."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        else:
            gb = None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim

    def bw(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(data, tensors, bw, "concat")


def take_rows(a: Tensor, index) -> Tensor:
    """Gather along the first axis; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    src = a.shape

    def bw(g):
        ga = np.zeros(src, dtype=g.dtype)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(a.data[index], (a,), bw, "take_rows")


def sparse_matmul(s, x: Tensor) -> Tensor:
    """``s @ x`` for a constant scipy sparse matrix ``s`` and a 2-d tensor ``x``."""
    if x.ndim != 2 or s.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul shape mismatch: {s.shape} @ {x.shape}")
    out = np.asarray(s @ x.data, dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.asarray(s.T @ g, dtype=g.dtype),), "sparse_matmul")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tensor_sum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# convolution and pooling


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, C, H', W', k, k) strided view of ``x`` (N, C, H, W)."""
    v = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``C_in×H×W`` or batched ``N×C_in×H×W``; ``kernel`` is
    ``C_out×C_in×k×k`` with odd ``k``.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be 3-d or 4-d, got {x.shape}")
    cout, cin, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {kernel.shape}")
    if xd.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    n, _, h, w = xd.shape
    span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d output size not integral for H={h}, W={w}, k={k}, "
            f"stride={stride}, padding={padding}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1
    kd = kernel.data
    if k == 1 and stride == 1 and padding == 0:
        # channel mixing only
        out = np.einsum("oc,nchw->nohw", kd[:, :, 0, 0], xd, optimize=True)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = _windows(xp, k, stride)
        out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = gk = gb = None
        if k == 1 and stride == 1 and padding == 0:
            if kernel.requires_grad:
                gk = np.einsum("nohw,nchw->oc", g4, xd, optimize=True)[:, :, None, None]
            if x.requires_grad:
                gx = np.einsum("oc,nohw->nchw", kd[:, :, 0, 0], g4, optimize=True)
        else:
            xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
            if kernel.requires_grad:
                win = _windows(xp, k, stride)
                gk = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                # (N, C_in, H', W', k, k) contribution per kernel offset
                contrib = np.tensordot(g4, kd, axes=([1], [0]))  # N,H',W',C_in,k,k
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                            contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if gx is not None and squeeze:
            gx = gx[0]
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make(out, parents, bw, "conv2d")


def pool2d(x: Tensor, kind: str = "max", k: int = 2, stride: int | None = None) -> Tensor:
    """Windowed max/avg reduction over the trailing two axes.

    Max-pool gradients go to the first maximal element of each window in
    row-major order.
    """
    if stride is None:
        stride = k
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} exceeds input {x.shape}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = _windows(xd, k, stride)[:, :, :ho, :wo]
    if kind == "avg":
        out = win.mean(axis=(4, 5))
    else:
        out = win.max(axis=(4, 5))
    out = np.ascontiguousarray(out.astype(xd.dtype, copy=False))
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = np.zeros(xd.shape, dtype=g.dtype)
        if kind == "avg":
            share = g4 / (k * k)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
        else:
            w2 = _windows(xd, k, stride)[:, :, :ho, :wo].reshape(n, c, ho, wo, k * k)
            arg = w2.argmax(axis=-1)  # first index on ties
            di, dj = np.divmod(arg, k)
            nn, cc, hh, ww = np.indices((n, c, ho, wo))
            np.add.at(gx, (nn, cc, hh * stride + di, ww * stride + dj), g4)
        return (gx[0] if squeeze else gx,)

    return _make(out, (x,), bw, f"{kind}pool")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the trailing two axes."""
    xd = x.data
    out = xd.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor))
        return (g.sum(axis=(-3, -1)),)

    return _make(out, (x,), bw, "upsample")


# ---------------------------------------------------------------------------
# normalisation, nonlinearities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        # recomputed instead of saved: only the input stays alive for backward
        mu_ = xd.mean(axis=-1, keepdims=True)
        xc_ = xd - mu_
        rstd_ = 1.0 / np.sqrt((xc_ * xc_).mean(axis=-1, keepdims=True) + eps)
        xhat_ = xc_ * rstd_
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd_ * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat_ * (gh * xhat_).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat_).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw, "layer_norm")


_SQRT_HALF = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def pointwise_apply(x: Tensor, fn: str) -> Tensor:
    """Apply ``relu``, ``gelu`` (exact erf form) or ``sigmoid`` elementwise."""
    xd = x.data
    if fn == "relu":
        out = np.maximum(xd, 0)

        def bw(g):
            return (g * (xd > 0),)

    elif fn == "gelu":
        out = 0.5 * xd * (1.0 + erf(xd * _SQRT_HALF))

        def bw(g):
            cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            return (g * (cdf + xd * pdf),)

    elif fn == "sigmoid":
        out = _sigmoid(xd)

        def bw(g):
            return (g * out * (1.0 - out),)

    else:
        raise ValueError(f"unknown pointwise function {fn!r}")
    return _make(out.astype(xd.dtype, copy=False), (x,), bw, fn)


def relu(x: Tensor) -> Tensor:
    return pointwise_apply(x, "relu")


def gelu(x: Tensor) -> Tensor:
    return pointwise_apply(x, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    return pointwise_apply(x, "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# attention


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention ``softmax(q kᵀ/√d + bias) v``.

    ``q`` is ``(..., Lq, d)``, ``k`` and ``v`` are ``(..., Lk, d)``; ``bias``
    broadcasts against the ``(..., Lq, Lk)`` logits.  The probability matrix
    is the only intermediate kept for backward.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    logits = (qd @ np.swapaxes(kd, -1, -2)) * scale
    if bias is not None:
        logits = logits + bias.data
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    saved = _Saved(p)
    out = p @ vd
    parents = (q, k, v) if bias is None else (q, k, v, bias)

    def bw(g):
        pr = saved.a
        gv = _unbroadcast(np.swapaxes(pr, -1, -2) @ g, vd.shape) if v.requires_grad else None
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = pr * (gp - (gp * pr).sum(axis=-1, keepdims=True))
        gq = _unbroadcast((gs @ kd) * scale, qd.shape) if q.requires_grad else None
        gk = _unbroadcast((np.swapaxes(gs, -1, -2) @ qd) * scale, kd.shape) if k.requires_grad else None
        if bias is None:
            return gq, gk, gv
        gb = _unbroadcast(gs, bias.shape) if bias.requires_grad else None
        return gq, gk, gv, gb

    return _make(out, parents, bw, "attention")


# ---------------------------------------------------------------------------
# losses (fused for numerical stability)


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (N×K) against integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    ld = logits.data
    n = ld.shape[0]
    if n == 0:
        return _make(np.zeros((), ld.dtype), (logits,), lambda g: (np.zeros_like(ld),), "cross_entropy")
    z = ld - ld.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    out = np.asarray(nll.mean(), dtype=ld.dtype)

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1.0
        return ((g / n) * p,)

    return _make(out, (logits,), bw, "cross_entropy")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy with logits."""
    t = np.asarray(targets, dtype=logits.dtype)
    ld = logits.data
    n = ld.size
    if n == 0:
        return _make(np.zeros((), ld.dtype), (logits,), lambda g: (np.zeros_like(ld),), "bce")
    loss = np.maximum(ld, 0) - ld * t + np.log1p(np.exp(-np.abs(ld)))
    out = np.asarray(loss.mean(), dtype=ld.dtype)

    def bw(g):
        return ((g / n) * (_sigmoid(ld) - t),)

    return _make(out, (logits,), bw, "bce")


def smooth_l1(pred: Tensor, target, beta: float = 1.0, normalizer: float | None = None) -> Tensor:
    """Sum of smooth-L1 terms divided by ``normalizer`` (default: element count)."""
    t = np.asarray(target, dtype=pred.dtype)
    d = pred.data - t
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    norm = float(normalizer if normalizer is not None else max(d.size, 1))
    out = np.asarray(loss.sum() / norm, dtype=pred.dtype)

    def bw(g):
        return ((g / norm) * np.where(quad, d / beta, np.sign(d)),)

    return _make(out, (pred,), bw, "smooth_l1")


# ---------------------------------------------------------------------------
# reverse pass


class Tape:
    """Reverse-topological replay order of the graph reachable from a root."""

    def __init__(self, root: Tensor) -> None:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
        # parents precede children in ``order``
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> None:
        """Propagate ``seed`` from the root; consumes the tape."""
        bufs: dict[int, _Saved] = {id(self.nodes[-1]): _Saved(seed)}
        nodes = self.nodes
        while nodes:
            node = nodes.pop()
            holder = bufs.pop(id(node), None)
            if node._backward is None:
                # leaf
                if holder is not None:
                    g = holder.a
                    if node.grad is None:
                        node.grad = g.astype(node.dtype, copy=True)
                    else:
                        node.grad = node.grad + g
                continue
            if holder is not None:
                grads = node._backward(holder.a)
                del holder
                for p, gp in zip(node._parents, grads):
                    if gp is None or not p.requires_grad:
                        continue
                    prev = bufs.get(id(p))
                    if prev is None:
                        bufs[id(p)] = _Saved(np.asarray(gp, dtype=p.dtype).reshape(p.shape))
                    else:
                        prev_arr = prev.a
                        bufs[id(p)] = _Saved(prev_arr + gp)
                        del prev, prev_arr
            node._parents = ()
            node._backward = None
            del node

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requiring leaf."""
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is detached from the graph (requires_grad=False)")
    tape = Tape(loss)
    tape.replay(np.ones(loss.shape, dtype=loss.dtype))


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Iterable[Tensor],
    eps: float = 1e-5,
    roundoff_ulps: float = 8.0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is called with no arguments when ``x`` is a list of tensors it closes
    over, or with ``x`` when ``x`` is a single tensor.  The relative error of a
    coordinate is ``max(|a - c| - r, 0) / max(|a|, |c|, 1e-8)`` where
    ``r = roundoff_ulps * ulp(max(|f+|, |f-|)) / eps`` bounds the rounding
    error of the difference quotient itself; without it a gradient that is
    exactly zero (e.g. of ``sum(softmax(x))``) reads as ~1e-3 error.  Pass
    ``roundoff_ulps=0`` for the bare ratio.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    call = (lambda: f(x)) if single else f
    for t in xs:
        t.grad = None
        t.requires_grad = True
    out = call()
    if out.size != 1:
        raise GradientError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    worst = 0.0
    with no_grad():
        for t in xs:
            analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
            flat = t.data.reshape(-1)
            a_flat = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(call().data)
                flat[i] = orig - eps
                fm = float(call().data)
                flat[i] = orig
                cd = (fp - fm) / (2.0 * eps)
                a = a_flat[i]
                r = roundoff_ulps * np.spacing(max(abs(fp), abs(fm))) / eps
                err = max(abs(a - cd) - r, 0.0) / max(abs(a), abs(cd), 1e-8)
                worst = max(worst, err)
    return worst
