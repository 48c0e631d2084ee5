"""Multi-scale pooled-attention encoder producing a per-modality feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

MODALITIES = ("rgb", "ndvi", "nir")

# fixed affine standardisation applied after scaling to [0, 1]
RGB_CENTER = 0.5
RGB_SCALE = 0.5


@dataclass
class EncoderConfig:
    patch_size: int = 8
    stage_channels: tuple = (32, 64, 128)
    stage_depths: tuple = (1, 1, 1)
    heads_per_stage: tuple = (2, 4, 4)
    pool_stride_kv: tuple = (2, 1, 1)
    use_relative_position_bias: bool = True
    in_channels: int = 3
    mlp_ratio: float = 2.0
    rel_pos_max: int = 7

    def __post_init__(self) -> None:
        for name in ("stage_channels", "stage_depths", "heads_per_stage", "pool_stride_kv"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        n = len(self.stage_channels)
        if n == 0:
            raise ValueError("encoder needs at least one stage")
        if not (len(self.stage_depths) == len(self.heads_per_stage) == len(self.pool_stride_kv) == n):
            raise ValueError("stage_channels, stage_depths, heads_per_stage and pool_stride_kv must have equal length")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage_channels must be strictly increasing, got {self.stage_channels}")
        for c, h in zip(self.stage_channels, self.heads_per_stage):
            if h < 1 or c % h:
                raise ValueError(f"stage channels {c} not divisible by {h} heads")
        if any(d < 1 for d in self.stage_depths):
            raise ValueError("stage depths must be >= 1")
        if self.patch_size < 1 or any(s < 1 for s in self.pool_stride_kv):
            raise ValueError("patch size and pool strides must be positive")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def pyramid_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        """``(C_s, H_s, W_s)`` for each stage."""
        if height % self.patch_size or width % self.patch_size:
            raise ShapeError(f"image {height}x{width} not divisible by patch size {self.patch_size}")
        shapes = []
        h, w = height // self.patch_size, width // self.patch_size
        for s, c in enumerate(self.stage_channels):
            if s > 0:
                if h % 2 or w % 2:
                    raise ShapeError(f"stage {s} grid {h}x{w} cannot be halved")
                h, w = h // 2, w // 2
            shapes.append((c, h, w))
        return shapes

    def strides(self) -> list[int]:
        return [self.patch_size * 2**s for s in range(self.num_stages)]


@dataclass
class FeaturePyramid:
    """Per-stage maps, each ``C_s×H_s×W_s`` (or batched ``B×C_s×H_s×W_s``)."""

    maps: list
    modality: str = "rgb"
    strides: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.maps)

    def shapes(self) -> list[tuple]:
        return [m.shape for m in self.maps]


def normalize_and_duplicate(plane, modality: str) -> np.ndarray:
    """Rescale one modality and replicate single-channel planes to 3 channels.

    RGB (``[0, 1]``) and min-max-scaled NIR are standardised with
    ``(x - 0.5) / 0.5``; NDVI is already in ``[-1, 1]`` and is used raw.
    Accepts ``C×H×W`` or batched ``B×C×H×W`` arrays.
    """
    x = np.asarray(plane.data if isinstance(plane, Tensor) else plane)
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected C×H×W or B×C×H×W, got shape {x.shape}")
    c = x.shape[1] if batched else x.shape[0]
    if c not in (1, 3):
        raise ShapeError(f"channel count must be 1 or 3, got {c}")
    if modality == "rgb":
        out = (x - RGB_CENTER) / RGB_SCALE
    elif modality == "ndvi":
        if x.size and (x.min() < -1.0 or x.max() > 1.0):
            raise ValueError(f"NDVI values outside [-1, 1]: [{x.min()}, {x.max()}]")
        out = x.copy()
    elif modality == "nir":
        axes = (1, 2, 3) if batched else (0, 1, 2)
        lo = x.min(axis=axes, keepdims=True)
        span = x.max(axis=axes, keepdims=True) - lo
        scaled = np.divide(x - lo, span, out=np.full_like(x, 0.5), where=span > 0)
        out = (scaled - RGB_CENTER) / RGB_SCALE
    else:
        raise ValueError(f"unknown modality {modality!r}")
    if c == 1:
        reps = (1, 3, 1, 1) if batched else (3, 1, 1)
        out = np.tile(out, reps)
    return out.astype(T.get_default_dtype(), copy=False)


class PatchEmbed(nn.Module):
    """Non-overlapping ``p×p`` patches projected to ``C_0`` channels."""

    def __init__(self, in_channels: int, dim: int, patch: int, rng: np.random.Generator) -> None:
        self.proj = nn.Linear(in_channels * patch * patch, dim, rng)
        self._patch = patch
        self._in = in_channels

    def forward(self, image: Tensor) -> Tensor:
        """``B×C×H×W`` -> channels-last token grid ``B×H_0×W_0×C_0``."""
        b, c, h, w = image.shape
        p = self._patch
        if c != self._in:
            raise ShapeError(f"patch embed expects {self._in} channels, got {c}")
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
        x = T.reshape(image, (b, c, h // p, p, w // p, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (b, h // p, w // p, c * p * p))
        return self.proj(x)


def patch_embed(image: Tensor, embed: PatchEmbed) -> Tensor:
    """Channels-first token grid ``C_0×H_0×W_0`` for one (or a batch of) image(s)."""
    batched = image.ndim == 4
    x = image if batched else T.reshape(image, (1,) + image.shape)
    tokens = T.transpose(embed(x), (0, 3, 1, 2))
    return tokens if batched else T.reshape(tokens, tokens.shape[1:])


def _pool_tokens(x: Tensor, stride: int) -> Tensor:
    """Average-pool a channels-last grid ``B×H×W×C`` by ``stride``."""
    if stride == 1:
        return x
    b, h, w, c = x.shape
    if h % stride or w % stride:
        raise ShapeError(f"grid {h}x{w} not divisible by pool stride {stride}")
    x = T.reshape(x, (b, h // stride, stride, w // stride, stride, c))
    return T.tensor_mean(x, axis=(2, 4))


def relative_offsets(q_grid, q_stride, k_grid, k_stride, max_dist):
    """Index of the clipped relative (dy, dx) offset for each query/key pair."""
    qy, qx = np.meshgrid(np.arange(q_grid[0]) * q_stride, np.arange(q_grid[1]) * q_stride, indexing="ij")
    ky, kx = np.meshgrid(np.arange(k_grid[0]) * k_stride, np.arange(k_grid[1]) * k_stride, indexing="ij")
    dy = np.clip(qy.reshape(-1, 1) - ky.reshape(1, -1), -max_dist, max_dist) + max_dist
    dx = np.clip(qx.reshape(-1, 1) - kx.reshape(1, -1), -max_dist, max_dist) + max_dist
    return dy * (2 * max_dist + 1) + dx


class PooledAttentionBlock(nn.Module):
    """Multi-head self-attention with pooled Q/K/V, residual pooling path and MLP."""

    def __init__(self, dim_in: int, dim_out: int, heads: int, q_stride: int, kv_stride: int,
                 rng: np.random.Generator, mlp_ratio: float = 2.0, rel_pos: bool = True,
                 rel_pos_max: int = 7, zero_out_proj: bool = False) -> None:
        if dim_out % heads:
            raise ShapeError(f"{dim_out} channels not divisible by {heads} heads")
        self.norm1 = nn.LayerNorm(dim_in)
        self.q = nn.Linear(dim_in, dim_out, rng)
        self.k = nn.Linear(dim_in, dim_out, rng)
        self.v = nn.Linear(dim_in, dim_out, rng)
        self.out = nn.Linear(dim_out, dim_out, rng, zero=zero_out_proj)
        self.skip = nn.Linear(dim_in, dim_out, rng, bias=False) if dim_in != dim_out else None
        self.rel_table = (
            Parameter(np.zeros(((2 * rel_pos_max + 1) ** 2, heads), dtype=T.get_default_dtype()))
            if rel_pos
            else None
        )
        self.norm2 = nn.LayerNorm(dim_out)
        self.mlp = nn.MLP(dim_out, int(dim_out * mlp_ratio), rng)
        self._heads = heads
        self._q_stride = q_stride
        self._kv_stride = kv_stride
        self._rel_max = rel_pos_max
        self._offset_cache: dict = {}
        self.last_score_elements = 0

    def _bias(self, q_grid, k_grid) -> Tensor:
        key = (q_grid, k_grid)
        idx = self._offset_cache.get(key)
        if idx is None:
            idx = relative_offsets(q_grid, self._q_stride, k_grid, self._kv_stride, self._rel_max)
            self._offset_cache[key] = idx
        lq, lk = idx.shape
        b = T.take_rows(self.rel_table, idx.reshape(-1))
        b = T.reshape(b, (lq, lk, self._heads))
        return T.transpose(b, (2, 0, 1))

    def forward(self, x: Tensor) -> Tensor:
        """``x``: channels-last ``B×H×W×C_in`` -> ``B×H'×W'×C_out``."""
        bsz = x.shape[0]
        xn = self.norm1(x)
        q = _pool_tokens(self.q(xn), self._q_stride)
        k = _pool_tokens(self.k(xn), self._kv_stride)
        v = _pool_tokens(self.v(xn), self._kv_stride)
        hq, wq, c = q.shape[1], q.shape[2], q.shape[3]
        hk, wk = k.shape[1], k.shape[2]
        h = self._heads
        d = c // h

        def split(t, hh, ww):
            t = T.reshape(t, (bsz, hh * ww, h, d))
            return T.transpose(t, (0, 2, 1, 3))

        bias = self._bias((hq, wq), (hk, wk)) if self.rel_table is not None else None
        att = T.attention(split(q, hq, wq), split(k, hk, wk), split(v, hk, wk), bias)
        self.last_score_elements = bsz * h * hq * wq * hk * wk
        att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (bsz, hq, wq, c))
        skip = x if self.skip is None else self.skip(xn)
        y = T.add(_pool_tokens(skip, self._q_stride), self.out(att))
        return T.add(y, self.mlp(self.norm2(y)))


def pooled_attention_block(x: Tensor, block: PooledAttentionBlock) -> Tensor:
    """Channels-first wrapper: ``C×H×W`` (or ``B×C×H×W``) in and out."""
    batched = x.ndim == 4
    t = x if batched else T.reshape(x, (1,) + x.shape)
    y = T.transpose(block(T.transpose(t, (0, 2, 3, 1))), (0, 3, 1, 2))
    return y if batched else T.reshape(y, y.shape[1:])


class Encoder(nn.Module):
    """Patch embedding followed by stages of pooled-attention blocks.

    Each stage after the first halves the grid (query pooling in its first
    block) and widens the channels; the output of every stage is one pyramid
    level.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        self.patch = PatchEmbed(cfg.in_channels, cfg.stage_channels[0], cfg.patch_size, rng)
        self.stages = []
        dim_in = cfg.stage_channels[0]
        for s, (c, depth, heads, kv) in enumerate(
            zip(cfg.stage_channels, cfg.stage_depths, cfg.heads_per_stage, cfg.pool_stride_kv)
        ):
            blocks = []
            for i in range(depth):
                q_stride = 2 if (s > 0 and i == 0) else 1
                kv_stride = kv * q_stride
                blocks.append(
                    PooledAttentionBlock(
                        dim_in, c, heads, q_stride, kv_stride, rng,
                        mlp_ratio=cfg.mlp_ratio,
                        rel_pos=cfg.use_relative_position_bias,
                        rel_pos_max=cfg.rel_pos_max,
                    )
                )
                dim_in = c
            self.stages.append(blocks)
        self._cfg = cfg

    @property
    def config(self) -> EncoderConfig:
        return self._cfg

    def forward(self, image, modality: str = "rgb") -> FeaturePyramid:
        if not isinstance(image, Tensor):
            image = Tensor(image)
        batched = image.ndim == 4
        x = image if batched else T.reshape(image, (1,) + image.shape)
        tokens = self.patch(x)
        maps = []
        for blocks in self.stages:
            for blk in blocks:
                tokens = blk(tokens)
            m = T.transpose(tokens, (0, 3, 1, 2))
            maps.append(m if batched else T.reshape(m, m.shape[1:]))
        return FeaturePyramid(maps, modality, self._cfg.strides())


def encode(image, encoder: Encoder, modality: str = "rgb") -> FeaturePyramid:
    return encoder(image, modality)
