import numpy as np
import pytest

from rtsfuse import tensor as T
from rtsfuse.encoder import (
    Encoder,
    EncoderConfig,
    PatchEmbed,
    PooledAttentionBlock,
    normalize_and_duplicate,
    patch_embed,
    pooled_attention_block,
)

pytestmark = pytest.mark.usefixtures("f64")


def test_ndvi_zero_plane_gives_three_zero_planes():
    out = normalize_and_duplicate(np.zeros((1, 4, 4)), "ndvi")
    assert out.shape == (3, 4, 4) and not out.any()


def test_rgb_passes_through_rescaled(rng):
    x = rng.uniform(0, 1, (3, 5, 5))
    out = normalize_and_duplicate(x, "rgb")
    np.testing.assert_allclose(out, (x - 0.5) / 0.5)


def test_nir_channels_are_bit_identical(rng):
    out = normalize_and_duplicate(rng.uniform(0, 3, (1, 6, 6)), "nir")
    assert out.shape == (3, 6, 6)
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])
    assert out.min() == -1.0 and out.max() == 1.0


def test_normalize_rejects_bad_input():
    with pytest.raises(ValueError):
        normalize_and_duplicate(np.full((1, 2, 2), 1.5), "ndvi")
    with pytest.raises(T.ShapeError):
        normalize_and_duplicate(np.zeros((2, 4, 4)), "rgb")


def test_patch_embed_shapes(rng):
    one = PatchEmbed(3, 5, 8, rng)
    assert patch_embed(T.Tensor(rng.normal(size=(3, 8, 8))), one).shape == (5, 1, 1)
    emb = PatchEmbed(3, 32, 8, rng)
    assert patch_embed(T.Tensor(rng.normal(size=(3, 64, 64))), emb).shape == (32, 8, 8)
    with pytest.raises(T.ShapeError):
        patch_embed(T.Tensor(np.zeros((3, 12, 12))), emb)


def test_patch_embed_is_linear_at_zero(rng):
    emb = PatchEmbed(3, 4, 2, rng)
    assert not patch_embed(T.Tensor(np.zeros((3, 4, 4))), emb).data.any()


def test_block_with_zero_projection_is_mlp_residual(rng):
    blk = PooledAttentionBlock(4, 4, 2, 1, 1, rng, zero_out_proj=True)
    x = T.Tensor(rng.normal(size=(4, 3, 3)))
    y = pooled_attention_block(x, blk)
    assert y.shape == x.shape
    t = T.transpose(T.reshape(x, (1, 4, 3, 3)), (0, 2, 3, 1))
    expected = T.add(t, blk.mlp(blk.norm2(t)))
    np.testing.assert_allclose(y.data, T.transpose(expected, (0, 3, 1, 2)).data[0], atol=1e-12)


def test_kv_pooling_cuts_score_elements_by_four(rng):
    x = T.Tensor(rng.normal(size=(1, 4, 8, 8)))
    full = PooledAttentionBlock(4, 4, 2, 1, 1, rng)
    pooled = PooledAttentionBlock(4, 4, 2, 1, 2, rng)
    y1, y2 = pooled_attention_block(x, full), pooled_attention_block(x, pooled)
    assert y1.shape == y2.shape == (1, 4, 8, 8)
    assert full.last_score_elements == 4 * pooled.last_score_elements


def test_block_gradient_on_4x4_grid(rng):
    blk = PooledAttentionBlock(4, 4, 2, 1, 2, rng, rel_pos_max=2)
    for p in blk.parameters():
        p.data[...] = rng.normal(0, 0.5, p.shape)
    x = T.Tensor(rng.normal(size=(4, 4, 4)))
    w = rng.normal(size=(4, 4, 4))
    loss = lambda: T.tensor_sum(T.mul(pooled_attention_block(x, blk), T.Tensor(w)))
    assert T.grad_check(loss, [x] + blk.parameters()) < 1e-4


def small_cfg(**kw):
    base = dict(patch_size=8, stage_channels=(32, 64), stage_depths=(1, 1), heads_per_stage=(2, 2),
                pool_stride_kv=(2, 1))
    base.update(kw)
    return EncoderConfig(**base)


def test_pyramid_shapes(rng):
    cfg = small_cfg()
    assert cfg.pyramid_shapes(64, 64) == [(32, 8, 8), (64, 4, 4)]
    pyr = Encoder(cfg, rng)(rng.normal(size=(3, 64, 64)))
    assert pyr.shapes() == [(32, 8, 8), (64, 4, 4)]
    assert pyr.strides == [8, 16]


def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(stage_channels=(64, 32))
    with pytest.raises(ValueError):
        small_cfg(heads_per_stage=(3, 2))
    with pytest.raises(ValueError):
        small_cfg(stage_depths=(1,))


def test_encode_duplicated_input_same_path(rng):
    enc = Encoder(small_cfg(patch_size=4, stage_channels=(4, 8)), rng)
    plane = rng.uniform(0, 1, (1, 16, 16))
    dup = normalize_and_duplicate(plane, "nir")
    a = enc(dup, "nir")
    b = enc(np.array(dup), "nir")
    for x, y in zip(a.maps, b.maps):
        assert np.array_equal(x.data, y.data)


def test_batch_permutation_equivariance(rng):
    enc = Encoder(small_cfg(patch_size=4, stage_channels=(4, 8)), rng)
    x = rng.normal(size=(2, 3, 16, 16))
    a = enc(x)
    b = enc(x[::-1].copy())
    for p, q in zip(a.maps, b.maps):
        np.testing.assert_array_equal(p.data, q.data[::-1])
