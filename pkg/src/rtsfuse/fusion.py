"""Fusion strategies for combining per-modality feature pyramids.

Feature-level strategies operate independently at every pyramid scale with
their own parameters.  ``data_level`` fusion happens before the encoder
(:func:`data_level_concat`) and is a pass-through here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .encoder import FeaturePyramid
from .tensor import ShapeError, Tensor

STRATEGIES = (
    "data_level",
    "conv",
    "stacked_attn",
    "cross_attn",
    "residual_conv",
    "residual_stacked_attn",
    "residual_cross_attn",
)
NEEDS_RGB = {"cross_attn", "residual_conv", "residual_stacked_attn", "residual_cross_attn"}


class FusionError(ValueError):
    """Strategy and modality bundle are incompatible."""


@dataclass
class FusionConfig:
    strategy: str = "residual_cross_attn"
    heads: int = 2
    conv_init: str = "identity"

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise FusionError(f"unknown fusion strategy {self.strategy!r}; choose from {STRATEGIES}")


@dataclass
class ModalityBundle:
    """Per-modality pyramids, RGB first when present."""

    pyramids: dict

    @property
    def n(self) -> int:
        return len(self.pyramids)

    @property
    def modalities(self) -> list[str]:
        return list(self.pyramids)

    def validate(self) -> None:
        shapes = [p.shapes() for p in self.pyramids.values()]
        if any(s != shapes[0] for s in shapes[1:]):
            raise ShapeError(f"pyramid shapes differ across modalities: {shapes}")


def data_level_concat(images) -> np.ndarray:
    """Stack normalised modality inputs along the channel axis in given order."""
    arrays = [np.asarray(im.data if isinstance(im, Tensor) else im) for im in images]
    if not arrays:
        raise ValueError("no modality inputs")
    ch_axis = arrays[0].ndim - 3
    spatial = {a.shape[ch_axis + 1:] for a in arrays}
    if len(spatial) != 1:
        raise ShapeError(f"spatial dims differ across modalities: {sorted(spatial)}")
    return np.concatenate(arrays, axis=ch_axis)


# ---------------------------------------------------------------------------
# layout helpers: B×C×H×W <-> B×L×C with row-major token order


def _to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def _from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    b, _, c = t.shape
    return T.transpose(T.reshape(t, (b, h, w, c)), (0, 3, 1, 2))


def _batched(x: Tensor) -> Tensor:
    return x if x.ndim == 4 else T.reshape(x, (1,) + x.shape)


def _like(y: Tensor, ref: Tensor) -> Tensor:
    return y if ref.ndim == 4 else T.reshape(y, y.shape[1:])


def _sum(tensors) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = T.elementwise_add(out, t)
    return out


def _check_same(features) -> None:
    shapes = {f.shape for f in features}
    if len(shapes) != 1:
        raise ShapeError(f"feature shapes differ: {sorted(shapes)}")


# ---------------------------------------------------------------------------
# fusion layers


class ConvFuse(nn.Module):
    """Concatenate ``N`` feature maps and project ``N·C -> C`` with a 1×1 conv."""

    def __init__(self, n: int, c: int, rng: np.random.Generator) -> None:
        self.proj = nn.Conv2d(n * c, c, 1, rng)
        self._n = n

    def forward(self, features) -> Tensor:
        return conv_fuse(features, self)


def conv_fuse(features, layer: ConvFuse) -> Tensor:
    if len(features) < 2:
        raise FusionError("conv fusion needs at least two modalities")
    _check_same(features)
    x = T.concat([_batched(f) for f in features], axis=1)
    return _like(layer.proj(x), features[0])


class StackedAttention(nn.Module):
    """Self-attention over spatial tokens of the channel-stacked modalities."""

    def __init__(self, n: int, c: int, heads: int, rng: np.random.Generator) -> None:
        d = n * c
        if d % heads:
            raise ShapeError(f"{d} stacked channels not divisible by {heads} heads")
        self.w_q = nn.Linear(d, d, rng, bias=False)
        self.w_k = nn.Linear(d, d, rng, bias=False)
        self.w_v = nn.Linear(d, d, rng, bias=False)
        self.w_o = nn.Linear(d, c, rng, bias=False, zero=True)
        self._heads = heads

    def forward(self, features) -> Tensor:
        return stacked_attention_fuse(features, self)


def _mha(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    b, lq, c = q.shape
    lk = k.shape[1]
    d = c // heads

    def split(t, length):
        return T.transpose(T.reshape(t, (b, length, heads, d)), (0, 2, 1, 3))

    out = T.attention(split(q, lq), split(k, lk), split(v, lk))
    return T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, lq, c))


def stacked_attention_fuse(features, layer: StackedAttention) -> Tensor:
    if len(features) < 2:
        raise FusionError("stacked attention fusion needs at least two modalities")
    _check_same(features)
    x = T.concat([_batched(f) for f in features], axis=1)
    _, _, h, w = x.shape
    tok = _to_tokens(x)
    att = _mha(layer.w_q(tok), layer.w_k(tok), layer.w_v(tok), layer._heads)
    return _like(_from_tokens(layer.w_o(att), h, w), features[0])


class CrossAttention(nn.Module):
    """RGB tokens query an auxiliary modality's tokens (keys and values)."""

    def __init__(self, c: int, heads: int, rng: np.random.Generator, zero_out: bool = True) -> None:
        if c % heads:
            raise ShapeError(f"{c} channels not divisible by {heads} heads")
        self.w_q = nn.Linear(c, c, rng, bias=False)
        self.w_k = nn.Linear(c, c, rng, bias=False)
        self.w_v = nn.Linear(c, c, rng, bias=False)
        self.w_o = nn.Linear(c, c, rng, bias=False, zero=zero_out)
        self._heads = heads

    @property
    def heads(self) -> int:
        return self._heads

    def forward(self, f_rgb: Tensor, f_aux: Tensor) -> Tensor:
        return cross_attention_fuse(f_rgb, f_aux, self)


def cross_attention_fuse(f_rgb: Tensor, f_aux: Tensor, params: CrossAttention) -> Tensor:
    if f_rgb.shape != f_aux.shape:
        raise ShapeError(f"cross attention shape mismatch: {f_rgb.shape} vs {f_aux.shape}")
    q_in = _batched(f_rgb)
    kv_in = _batched(f_aux)
    _, _, h, w = q_in.shape
    tq, tk = _to_tokens(q_in), _to_tokens(kv_in)
    att = _mha(params.w_q(tq), params.w_k(tk), params.w_v(tk), params.heads)
    return _like(_from_tokens(params.w_o(att), h, w), f_rgb)


def residual_combine(f_rgb: Tensor, f_mods, f_primes, conv: nn.Conv2d) -> Tensor:
    """``Conv(F_rgb ⊕ F_mod1 ⊕ … ⊕ F'_1 ⊕ …)`` with a channel-preserving conv."""
    f_mods, f_primes = list(f_mods), list(f_primes)
    if len(f_mods) != len(f_primes):
        raise ShapeError(f"{len(f_mods)} modality maps but {len(f_primes)} fused maps")
    total = _sum([f_rgb] + f_mods + f_primes)
    return _like(conv(_batched(total)), f_rgb)


class ScaleFusion(nn.Module):
    """Parameters and dispatch for one pyramid scale."""

    def __init__(self, strategy: str, modalities, c: int, heads: int, rng: np.random.Generator,
                 conv_init: str = "identity") -> None:
        n = len(modalities)
        aux = [m for m in modalities if m != "rgb"]
        self._strategy = strategy
        self._aux = aux
        if strategy == "conv":
            self.conv = ConvFuse(n, c, rng)
        elif strategy == "stacked_attn":
            self.attn = StackedAttention(n, c, heads, rng)
        elif strategy in ("cross_attn", "residual_cross_attn"):
            self.cross = {m: CrossAttention(c, heads, rng) for m in aux}
            self.proj = nn.Conv2d(c, c, 1, rng, init=conv_init)
        elif strategy == "residual_conv":
            self.pair = {m: ConvFuse(2, c, rng) for m in aux}
            self.proj = nn.Conv2d(c, c, 1, rng, init=conv_init)
        elif strategy == "residual_stacked_attn":
            self.pair = {m: StackedAttention(2, c, heads, rng) for m in aux}
            self.proj = nn.Conv2d(c, c, 1, rng, init=conv_init)

    def forward(self, feats: dict) -> Tensor:
        s = self._strategy
        mods = list(feats)
        if s == "conv":
            return conv_fuse([feats[m] for m in mods], self.conv)
        if s == "stacked_attn":
            return stacked_attention_fuse([feats[m] for m in mods], self.attn)
        f_rgb = feats["rgb"]
        f_mods = [feats[m] for m in self._aux]
        if s == "cross_attn":
            primes = [cross_attention_fuse(f_rgb, feats[m], self.cross[m]) for m in self._aux]
            return _like(self.proj(_batched(_sum(primes))), f_rgb)
        if s == "residual_cross_attn":
            primes = [cross_attention_fuse(f_rgb, feats[m], self.cross[m]) for m in self._aux]
        elif s == "residual_conv":
            primes = [conv_fuse([f_rgb, feats[m]], self.pair[m]) for m in self._aux]
        else:  # residual_stacked_attn
            primes = [stacked_attention_fuse([f_rgb, feats[m]], self.pair[m]) for m in self._aux]
        return residual_combine(f_rgb, f_mods, primes, self.proj)


class Fusion(nn.Module):
    """Per-scale fusion of a :class:`ModalityBundle` into one pyramid.

    With a single modality (or ``data_level``) the input pyramid is returned
    unchanged and the module holds no parameters.
    """

    def __init__(self, cfg: FusionConfig, modalities, stage_channels, rng: np.random.Generator) -> None:
        modalities = list(modalities)
        check_compatible(cfg.strategy, modalities)
        self._cfg = cfg
        self._modalities = modalities
        self._bypass = cfg.strategy == "data_level" or len(modalities) == 1
        self.scales = (
            []
            if self._bypass
            else [ScaleFusion(cfg.strategy, modalities, c, cfg.heads, rng, cfg.conv_init) for c in stage_channels]
        )

    @property
    def bypass(self) -> bool:
        return self._bypass

    def forward(self, bundle: ModalityBundle) -> FeaturePyramid:
        return fuse(bundle, self)


def check_compatible(strategy: str, modalities) -> None:
    if strategy not in STRATEGIES:
        raise FusionError(f"unknown fusion strategy {strategy!r}")
    modalities = list(modalities)
    if not modalities:
        raise FusionError("no modalities given")
    if len(modalities) > 1 and strategy in NEEDS_RGB and "rgb" not in modalities:
        raise FusionError(f"strategy {strategy!r} requires the rgb modality, got {modalities}")


def fuse(bundle: ModalityBundle, fusion: Fusion) -> FeaturePyramid:
    if fusion.bypass:
        if bundle.n != 1:
            raise FusionError(
                f"bypass fusion expects a single pyramid, got {bundle.n} ({bundle.modalities})"
            )
        return next(iter(bundle.pyramids.values()))
    if sorted(bundle.modalities) != sorted(fusion._modalities):
        raise FusionError(f"bundle modalities {bundle.modalities} != fusion modalities {fusion._modalities}")
    bundle.validate()
    first = next(iter(bundle.pyramids.values()))
    out = []
    for s, layer in enumerate(fusion.scales):
        feats = {m: bundle.pyramids[m].maps[s] for m in fusion._modalities}
        out.append(layer(feats))
    return FeaturePyramid(out, "fused", list(first.strides))
