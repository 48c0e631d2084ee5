"""Parameter counts, an analytic training-memory model, and instrumented peaks.

The memory model counts tensor payload bytes the same way
:class:`~rtsfuse.tensor.AllocationMeter` does: every live tensor contributes
its full ``nbytes`` (reshape and transpose results included), attention keeps
its probability matrix, and a subgraph without trainable inputs keeps nothing
once its output has been produced.  Optimizer moments and numpy temporaries
inside an op are excluded.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig
from .model import ModelConfig, group_of


# ---------------------------------------------------------------------------
# parameters


@dataclass
class GroupCount:
    name: str
    total: int
    trainable: bool


@dataclass
class ParamReport:
    groups: list = field(default_factory=list)
    total: int = 0
    trainable: int = 0
    frozen: int = 0

    def group_total(self, prefix: str) -> int:
        return sum(g.total for g in self.groups if g.name == prefix or g.name.startswith(prefix + "."))

    def to_dict(self) -> dict:
        return {"groups": [asdict(g) for g in self.groups], "total": self.total,
                "trainable": self.trainable, "frozen": self.frozen}


def count_params(model, frozen_groups=None) -> ParamReport:
    """Exact parameter counts per group.

    A group is frozen when listed in ``frozen_groups``; by default the
    parameters' own ``requires_grad`` flags decide.
    """
    totals: dict = {}
    trainable: dict = {}
    for name, p in model.named_parameters():
        g = group_of(name)
        totals[g] = totals.get(g, 0) + p.size
        is_trainable = p.requires_grad if frozen_groups is None else g not in set(frozen_groups)
        trainable[g] = trainable.get(g, True) and is_trainable
    rep = ParamReport()
    for g, n in totals.items():
        rep.groups.append(GroupCount(g, int(n), bool(trainable[g])))
        rep.total += int(n)
        if trainable[g]:
            rep.trainable += int(n)
        else:
            rep.frozen += int(n)
    return rep


# ---------------------------------------------------------------------------
# analytic memory model


@dataclass
class MemoryEstimate:
    parameter_bytes: int = 0
    gradient_bytes: int = 0
    sample_bytes: int = 0
    forward_activation_bytes: int = 0  # transient working set of frozen subgraphs
    backward_retained_bytes: int = 0  # graph tensors kept alive for backward
    attention_score_bytes: int = 0

    @property
    def total(self) -> int:
        return (self.parameter_bytes + self.gradient_bytes + self.sample_bytes + self.forward_activation_bytes
                + self.backward_retained_bytes + self.attention_score_bytes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


@dataclass
class _Cost:
    """Element counts of one layer's tensors."""

    retained: int = 0  # tensors alive until backward when the layer is trainable
    scores: int = 0  # attention probabilities
    output: int = 0  # the layer's output (kept by the consumer)
    is_output: bool = False  # a pyramid level
    workset: int = 0  # peak live elements when run without a graph

    def __add__(self, other: "_Cost") -> "_Cost":
        return _Cost(self.retained + other.retained, self.scores + other.scores, other.output)


def _pool_cost(n_in: int, n_out: int, c: int, stride: int) -> int:
    # reshape view + sum + scale
    return 0 if stride == 1 else n_in * c + 2 * n_out * c


def _block_cost(b: int, h: int, w: int, c_in: int, c_out: int, heads: int, q_stride: int,
                kv_stride: int, mlp_ratio: float, rel_pos: bool) -> tuple[_Cost, tuple[int, int]]:
    n = b * h * w
    hq, wq = h // q_stride, w // q_stride
    hk, wk = h // kv_stride, w // kv_stride
    nq, nk = b * hq * wq, b * hk * wk
    lq, lk = hq * wq, hk * wk
    hid = int(c_out * mlp_ratio)
    r = n * c_in  # norm1
    r += 2 * n * c_out + _pool_cost(n, nq, c_out, q_stride)  # q projection + pool
    r += 2 * (2 * n * c_out + _pool_cost(n, nk, c_out, kv_stride))  # k, v
    if rel_pos:
        r += 3 * lq * lk * heads  # gather, reshape, transpose
    r += 2 * nq * c_out + 4 * nk * c_out  # head split
    r += nq * c_out  # attention output
    r += 2 * nq * c_out  # head merge
    if c_in != c_out:
        r += n * c_out  # skip projection
        skip_c = c_out
    else:
        skip_c = c_in
    r += _pool_cost(n, nq, skip_c, q_stride)
    r += 2 * nq * c_out + nq * c_out  # out projection, residual
    r += nq * c_out + 2 * nq * hid + nq * hid + 2 * nq * c_out + nq * c_out  # norm2, mlp, residual
    return _Cost(r, b * heads * lq * lk, nq * c_out), (hq, wq)


def _block_workset(b: int, h: int, w: int, c_in: int, c_out: int, heads: int, q_stride: int,
                   kv_stride: int, mlp_ratio: float, rel_pos: bool) -> int:
    """Largest set of simultaneously live tensors when a block runs without a graph."""
    n = b * h * w
    hq, wq = h // q_stride, w // q_stride
    hk, wk = h // kv_stride, w // kv_stride
    nq, nk = b * hq * wq, b * hk * wk
    lq, lk = hq * wq, hk * wk
    hid = int(c_out * mlp_ratio)
    base = 2 * n * c_in + nq * c_out + 2 * nk * c_out  # input, normed input, pooled q/k/v
    bias = lq * lk * heads if rel_pos else 0
    at_attention = base + 2 * (nq * c_out + 2 * nk * c_out) // 2 + bias + b * heads * lq * lk + nq * c_out
    skip = (n * c_out if c_in != c_out else 0) + (nq * c_out if q_stride > 1 else 0)
    at_mlp = base + bias + nq * c_out + skip + 2 * nq * c_out + 2 * nq * hid
    return max(at_attention, at_mlp)


def _encoder_costs(cfg: EncoderConfig, b: int, height: int, width: int) -> list[_Cost]:
    """Per-layer costs: patch embedding, each block, and the channels-first output maps."""
    p = cfg.patch_size
    h, w = height // p, width // p
    n0 = b * h * w
    c0 = cfg.stage_channels[0]
    # reshaped patch matrix is kept by the projection; reshape/transpose before it are not
    patch = n0 * cfg.in_channels * p * p
    costs = [_Cost(patch + 2 * n0 * c0, 0, n0 * c0, workset=2 * patch + 2 * n0 * c0)]
    dim_in = c0
    for s, (c, depth, heads, kv) in enumerate(
        zip(cfg.stage_channels, cfg.stage_depths, cfg.heads_per_stage, cfg.pool_stride_kv)
    ):
        for i in range(depth):
            qs = 2 if (s > 0 and i == 0) else 1
            args = (b, h, w, dim_in, c, heads, qs, kv * qs, cfg.mlp_ratio, cfg.use_relative_position_bias)
            cost, (h, w) = _block_cost(*args)
            cost.workset = _block_workset(*args)
            costs.append(cost)
            dim_in = c
        costs.append(_Cost(b * h * w * c, 0, b * h * w * c, True))  # stage output transpose
    return costs


def _attn_fuse_cost(b: int, l: int, c_q: int, c: int, heads: int, grad_in: bool, n_inputs: int) -> _Cost:
    """One attention fusion over ``l`` tokens of width ``c_q`` projecting to ``c``.

    ``n_inputs`` token conversions happen (2 for cross attention: query map and
    key/value map).  Without incoming gradients only the reshaped tokens, held
    by the projections, survive.
    """
    r = n_inputs * (2 if grad_in else 1) * b * l * c_q
    r += 3 * b * l * c_q  # Q, K, V projections
    r += 6 * b * l * c_q  # head split
    r += b * l * c_q  # attention output
    r += 2 * b * l * c_q  # head merge
    r += b * l * c  # output projection
    r += 2 * b * l * c  # back to channels-first
    return _Cost(r, b * heads * l * l, b * l * c)


def _residual_sum_cost(n: int, e: int, grad_in: bool) -> int:
    """``F_rgb + F_mods + F_primes`` chain plus the projection output."""
    adds = 2 * n - 2 if grad_in else n
    return adds * e + e


def _fusion_costs(cfg: ModelConfig, b: int, shapes, grad_in: bool) -> list[_Cost]:
    n = len(cfg.modalities)
    s = cfg.fusion.strategy
    if s == "data_level" or n == 1:
        return []
    heads = cfg.fusion.heads
    costs = []
    for c, h, w in shapes:
        l = h * w
        e = b * l * c
        if s == "conv":
            costs.append(_Cost(n * e + e, 0, e))
        elif s == "stacked_attn":
            cost = _attn_fuse_cost(b, l, n * c, c, heads, grad_in, 1)
            cost.retained += n * e if grad_in else 0  # channel concat
            costs.append(cost)
        elif s in ("cross_attn", "residual_cross_attn"):
            tot = _Cost()
            for _ in range(n - 1):
                tot = tot + _attn_fuse_cost(b, l, c, c, heads, grad_in, 2)
            tot.retained += (max(n - 2, 0) * e + e) if s == "cross_attn" else _residual_sum_cost(n, e, grad_in)
            costs.append(tot)
        elif s == "residual_conv":
            costs.append(_Cost((n - 1) * 3 * e + _residual_sum_cost(n, e, grad_in), 0, e))
        elif s == "residual_stacked_attn":
            tot = _Cost()
            for _ in range(n - 1):
                pair = _attn_fuse_cost(b, l, 2 * c, c, heads, grad_in, 1)
                pair.retained += 2 * e if grad_in else 0
                tot = tot + pair
            tot.retained += _residual_sum_cost(n, e, grad_in)
            costs.append(tot)
    return costs


def estimate_training_memory(cfg: ModelConfig, input_shape, frozen_groups=(), batch: int = 1,
                             bytes_per_element: int | None = None) -> MemoryEstimate:
    """Analytic bytes for one training step of the backbone(s) and fusion.

    ``input_shape`` is ``(H, W)``.  The peak is the larger of two phases:
    encoding (where a frozen backbone holds only its finished pyramid levels
    plus one layer's working set) and the start of backward (every graph
    tensor, attention probabilities and parameter gradients).  The sample
    and parameters are resident throughout.  The detection head is outside
    this model.
    """
    from .model import Pipeline

    height, width = input_shape
    bpe = bytes_per_element or T.get_default_dtype().itemsize
    frozen = set(frozen_groups)
    counts = count_params(Pipeline(cfg, np.random.default_rng(0)), frozen_groups=frozen)
    est = MemoryEstimate()
    est.parameter_bytes = counts.total * bpe
    est.gradient_bytes = sum(g.total for g in counts.groups if g.trainable and g.name != "head") * bpe

    n_in = 3 * len(cfg.modalities)
    if cfg.data_level:
        enc = [("backbone.data", EncoderConfig(**{**asdict(cfg.encoder), "in_channels": n_in}))]
    else:
        enc = [(f"backbone.{m}", cfg.encoder) for m in cfg.modalities]
    est.sample_bytes = batch * n_in * height * width * bpe
    any_grad = False
    retained = scores = 0
    fwd_peak = 0  # live elements during encoding, excluding the sample
    for g, ecfg in enc:
        for c in _encoder_costs(ecfg, batch, height, width):
            if g in frozen:
                fwd_peak = max(fwd_peak, retained + (c.workset or c.retained))
                retained += c.output if c.is_output else 0
            else:
                any_grad = True
                retained += c.retained
                scores += c.scores
                fwd_peak = max(fwd_peak, retained + scores)
    for c in _fusion_costs(cfg, batch, cfg.encoder.pyramid_shapes(height, width), grad_in=any_grad):
        retained += c.retained
        scores += c.scores
    est.backward_retained_bytes = retained * bpe
    est.attention_score_bytes = scores * bpe
    # forward-only excess over what the backward phase holds
    est.forward_activation_bytes = max(0, fwd_peak * bpe - (est.backward_retained_bytes
                                                           + est.attention_score_bytes + est.gradient_bytes))
    return est


# ---------------------------------------------------------------------------
# instrumented measurement


def instrument_peak(closure) -> int:
    """High-water mark of tensor payload bytes while ``closure`` runs.

    Only tensors created inside the closure are counted.
    """
    with T.AllocationMeter() as meter:
        closure()
    return int(meter.peak)


def backbone_training_step(model, samples):
    """Closure for one backbone + fusion training step with a summed-output loss."""
    from .model import Pipeline

    assert isinstance(model, Pipeline)

    def run():
        inputs = model.prepare_inputs(samples)  # the loaded sample stays resident
        pyr = model.encode_modalities(samples, inputs)
        fused = model.fuse(pyr)
        loss = None
        for m in fused.maps:
            s = T.tensor_sum(m)
            loss = s if loss is None else T.add(loss, s)
        if loss.requires_grad:
            T.backward(loss)
        model.zero_grad()

    return run


def report_text(params: ParamReport, memory: MemoryEstimate | None = None) -> str:
    """Aligned plain-text table."""
    width = max([len(g.name) for g in params.groups] + [10])
    lines = [f"{'group':<{width}}  {'params':>12}  trainable"]
    for g in params.groups:
        lines.append(f"{g.name:<{width}}  {g.total:>12,d}  {'yes' if g.trainable else 'no'}")
    lines.append(f"{'total':<{width}}  {params.total:>12,d}")
    lines.append(f"{'trainable':<{width}}  {params.trainable:>12,d}")
    lines.append(f"{'frozen':<{width}}  {params.frozen:>12,d}")
    if memory is not None:
        lines.append("")
        for k, v in memory.to_dict().items():
            lines.append(f"{k:<28}  {v / 2**20:>10.3f} MiB")
    return "\n".join(lines)


def report_json(params: ParamReport, memory: MemoryEstimate | None = None) -> str:
    doc = {"params": params.to_dict(), "memory": memory.to_dict() if memory else None}
    return json.dumps(doc, indent=1, sort_keys=True)
