"""Finite-difference gradient suite over every differentiable op and the
composite blocks built from them.

Each case draws small random 64-bit inputs, reduces the op's output to a
scalar with a fixed random weighting (so no coordinate's gradient cancels by
construction) and compares the tape's gradient with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import nn
from . import tensor as T
from .encoder import PooledAttentionBlock
from .fusion import STRATEGIES, ScaleFusion
from .head import MaskHead, roi_pool
from .tensor import Tensor

EPS = 1e-5
TOLERANCE = 1e-4


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tensor_sum(T.mul(out, Tensor(w)))


def _reduce(op, inputs, rng):
    """Scalar ``Σ w ⊙ op(*inputs)`` with ``w`` drawn once."""
    with T.no_grad():
        shape = op(*inputs).shape
    w = rng.normal(size=shape)
    return lambda: _weighted_sum(op(*inputs), w), list(inputs)


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale)


def _randomize(module: nn.Module, rng, scale=0.5) -> list[Tensor]:
    """Overwrite every parameter with noise (zero-initialised layers included)."""
    params = module.parameters()
    for p in params:
        p.data[...] = rng.normal(size=p.shape) * scale
    return params


def _shape(rng, ndim_lo=1, ndim_hi=3, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=rng.integers(ndim_lo, ndim_hi + 1)))


# -- primitive ops -------------------------------------------------------------


def _case_elementwise_add(rng):
    s = _shape(rng)
    return _reduce(T.elementwise_add, [_t(rng, *s), _t(rng, *s)], rng)


def _case_add_broadcast(rng):
    s = _shape(rng, 2, 3)
    return _reduce(T.add, [_t(rng, *s), _t(rng, s[-1])], rng)


def _case_sub(rng):
    s = _shape(rng)
    return _reduce(T.sub, [_t(rng, *s), _t(rng, *s)], rng)


def _case_mul(rng):
    s = _shape(rng)
    return _reduce(T.mul, [_t(rng, *s), _t(rng, *s)], rng)


def _case_neg(rng):
    return _reduce(T.neg, [_t(rng, *_shape(rng))], rng)


def _case_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 6, size=3))
    lead = () if rng.random() < 0.5 else (int(rng.integers(1, 3)),)
    return _reduce(T.matmul, [_t(rng, *lead, m, k), _t(rng, k, n)], rng)


def _case_reshape(rng):
    a, b = (int(v) for v in rng.integers(1, 5, size=2))
    return _reduce(lambda x: T.reshape(x, (b, a)), [_t(rng, a, b)], rng)


def _case_transpose(rng):
    s = _shape(rng, 3, 3)
    axes = tuple(int(v) for v in rng.permutation(3))
    return _reduce(lambda x: T.transpose(x, axes), [_t(rng, *s)], rng)


def _case_concat(rng):
    s = list(_shape(rng, 2, 3))
    axis = int(rng.integers(len(s)))
    s2 = list(s)
    s2[axis] = int(rng.integers(1, 4))
    return _reduce(lambda a, b: T.concat([a, b], axis), [_t(rng, *s), _t(rng, *s2)], rng)


def _case_take_rows(rng):
    n = int(rng.integers(2, 6))
    idx = rng.integers(0, n, size=int(rng.integers(1, 8)))  # repeats exercise accumulation
    return _reduce(lambda x: T.take_rows(x, idx), [_t(rng, n, 3)], rng)


def _case_sparse_matmul(rng):
    n, m = (int(v) for v in rng.integers(2, 6, size=2))
    s = sp.random(m, n, density=0.5, random_state=np.random.RandomState(int(rng.integers(1 << 31))), format="csr")
    return _reduce(lambda x: T.sparse_matmul(s, x), [_t(rng, n, 3)], rng)


def _case_sum(rng):
    s = _shape(rng, 2, 3)
    axis = int(rng.integers(len(s)))
    keep = bool(rng.random() < 0.5)
    return _reduce(lambda x: T.tensor_sum(x, axis, keep), [_t(rng, *s)], rng)


def _case_mean(rng):
    s = _shape(rng, 2, 3)
    axis = None if rng.random() < 0.3 else int(rng.integers(len(s)))
    return _reduce(lambda x: T.tensor_mean(x, axis), [_t(rng, *s)], rng)


def _case_conv2d(rng):
    c_in, c_out = (int(v) for v in rng.integers(1, 4, size=2))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    h = int(rng.integers(k, k + 4))
    # trim so the output size is integral
    h -= (h + 2 * pad - k) % stride
    x, w, b = _t(rng, 1, c_in, h, h), _t(rng, c_out, c_in, k, k), _t(rng, c_out)
    return _reduce(lambda x, w, b: T.conv2d(x, w, b, stride, pad), [x, w, b], rng)


def _case_pool_max(rng):
    k = int(rng.integers(1, 3))
    n = k * int(rng.integers(1, 4))
    return _reduce(lambda x: T.pool2d(x, "max", k), [_t(rng, 1, 2, n, n)], rng)


def _case_pool_avg(rng):
    k = int(rng.integers(1, 4))
    n = k * int(rng.integers(1, 3))
    return _reduce(lambda x: T.pool2d(x, "avg", k), [_t(rng, 2, n, n)], rng)


def _case_upsample(rng):
    f = int(rng.integers(1, 4))
    return _reduce(lambda x: T.upsample_nearest(x, f), [_t(rng, 1, 2, 2, 3)], rng)


def _case_softmax(rng):
    return _reduce(T.softmax, [_t(rng, *_shape(rng, 1, 2, 2, 6), scale=2.0)], rng)


def _case_layer_norm(rng):
    s = _shape(rng, 1, 3, 2, 5)
    d = s[-1]
    return _reduce(T.layer_norm, [_t(rng, *s), _t(rng, d), _t(rng, d)], rng)


def _case_pointwise(fn):
    def case(rng):
        return _reduce(lambda x: T.pointwise_apply(x, fn), [_t(rng, *_shape(rng), scale=2.0)], rng)

    return case


def _case_attention(rng):
    b, h, lq, lk, d = (int(v) for v in rng.integers(1, 4, size=5))
    q, k, v = _t(rng, b, h, lq, d), _t(rng, b, h, lk, d), _t(rng, b, h, lk, d)
    bias = _t(rng, h, lq, lk)
    return _reduce(T.attention, [q, k, v, bias], rng)


def _case_cross_entropy(rng):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    labels = rng.integers(0, k, size=n)
    x = _t(rng, n, k, scale=2.0)
    return (lambda: T.cross_entropy(x, labels)), [x]


def _case_bce(rng):
    s = _shape(rng)
    x = _t(rng, *s, scale=2.0)
    t = (rng.random(s) < 0.5).astype(np.float64)
    return (lambda: T.bce_with_logits(x, t)), [x]


def _case_smooth_l1(rng):
    s = _shape(rng)
    x = _t(rng, *s)
    target = rng.normal(size=s)
    beta = float(rng.choice([1.0, 1.0 / 9.0, 0.5]))
    norm = float(rng.integers(1, 5))
    return (lambda: T.smooth_l1(x, target, beta, norm)), [x]


# -- composite blocks ------------------------------------------------------------


def _case_pooled_attention(rng):
    # two-channel layer norm is nearly flat (outputs ±1), which leaves no signal to check
    c_in = int(rng.choice([3, 4]))
    c_out = int(rng.choice([4, 6]))
    q_stride = int(rng.integers(1, 3))
    kv_stride = q_stride * int(rng.integers(1, 3))
    n = 2 * kv_stride
    blk = PooledAttentionBlock(c_in, c_out, 2, q_stride, kv_stride, rng, mlp_ratio=1.0, rel_pos_max=1)
    params = _randomize(blk, rng)
    x = _t(rng, 1, n, n, c_in)
    with T.no_grad():
        w = rng.normal(size=blk(x).shape)
    return (lambda: _weighted_sum(blk(x), w)), [x] + params


def _case_fusion(strategy):
    def case(rng):
        mods = ["rgb", "ndvi", "nir"][: int(rng.integers(2, 4))]
        c = 4
        layer = ScaleFusion(strategy, mods, c, 2, rng)
        params = _randomize(layer, rng)
        feats = {m: _t(rng, 1, c, 2, 2) for m in mods}
        with T.no_grad():
            w = rng.normal(size=layer(feats).shape)
        return (lambda: _weighted_sum(layer(feats), w)), list(feats.values()) + params

    return case


def _case_roi_pool(rng):
    maps = [_t(rng, 1, 2, 4, 4), _t(rng, 1, 2, 2, 2)]
    lo = rng.uniform(0, 12, size=(2, 2))
    boxes = np.concatenate([lo, lo + rng.uniform(3, 14, size=(2, 2))], axis=1)
    fn = lambda a, b: roi_pool([a, b], boxes, np.zeros(2, int), [4, 8], 2, canonical_size=8)  # noqa: E731
    return _reduce(fn, maps, rng)


def _case_mask_head(rng):
    head = MaskHead(2, 1, rng)
    params = _randomize(head, rng)
    x = _t(rng, 1, 2, 4, 4)
    with T.no_grad():
        shape = head(x).shape
    targets = (rng.random(shape) < 0.5).astype(np.float64)
    return (lambda: T.bce_with_logits(head(x), targets)), [x] + params


def _case_conv_layer(rng):
    conv = nn.Conv2d(2, 3, 3, rng, padding=1)
    params = _randomize(conv, rng)
    x = _t(rng, 1, 2, 3, 3)
    return _reduce(conv, [x], rng)[0], [x] + params


OPS = {
    "elementwise_add": _case_elementwise_add,
    "add_broadcast": _case_add_broadcast,
    "sub": _case_sub,
    "mul": _case_mul,
    "neg": _case_neg,
    "matmul": _case_matmul,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat": _case_concat,
    "take_rows": _case_take_rows,
    "sparse_matmul": _case_sparse_matmul,
    "sum": _case_sum,
    "mean": _case_mean,
    "conv2d": _case_conv2d,
    "pool_max": _case_pool_max,
    "pool_avg": _case_pool_avg,
    "upsample_nearest": _case_upsample,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "relu": _case_pointwise("relu"),
    "gelu": _case_pointwise("gelu"),
    "sigmoid": _case_pointwise("sigmoid"),
    "attention": _case_attention,
    "cross_entropy": _case_cross_entropy,
    "bce_with_logits": _case_bce,
    "smooth_l1": _case_smooth_l1,
}

COMPOSITES = {
    "pooled_attention_block": _case_pooled_attention,
    "conv_layer": _case_conv_layer,
    "roi_pool": _case_roi_pool,
    "mask_head_loss": _case_mask_head,
    **{f"fusion.{s}": _case_fusion(s) for s in STRATEGIES if s != "data_level"},
}

CASES = {**OPS, **COMPOSITES}


@dataclass
class CaseResult:
    name: str
    cases: int
    max_error: float
    seconds: float
    errors: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.max_error < TOLERANCE)

    def to_dict(self) -> dict:
        return {"name": self.name, "cases": self.cases, "max_rel_error": self.max_error,
                "passed": self.passed}


def check_case(name: str, rng: np.random.Generator, eps: float = EPS) -> float:
    with T.precision(np.float64):
        f, xs = CASES[name](rng)
        return T.grad_check(f, xs, eps)


def run_suite(names=None, cases: int = 20, seed: int = 0, eps: float = EPS) -> list[CaseResult]:
    """Run ``cases`` random draws of each named case (default: all)."""
    names = list(CASES) if names is None else list(names)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradient cases {unknown}")
    out = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        errs = [check_case(name, rng, eps) for _ in range(cases)]
        out.append(CaseResult(name, cases, float(max(errs)), time.perf_counter() - t0, errs))
    return out
