import numpy as np
import pytest

from rtsfuse import nn
from rtsfuse import tensor as T
from rtsfuse.encoder import FeaturePyramid
from rtsfuse.fusion import (
    STRATEGIES,
    ConvFuse,
    CrossAttention,
    Fusion,
    FusionConfig,
    FusionError,
    ModalityBundle,
    StackedAttention,
    check_compatible,
    conv_fuse,
    cross_attention_fuse,
    data_level_concat,
    residual_combine,
    stacked_attention_fuse,
)

pytestmark = pytest.mark.usefixtures("f64")


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data[...] = rng.normal(0, scale, p.shape)


def softmax_rows(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def dense_attention(q_map, kv_map, wq, wk, wv, wo, heads):
    """Direct per-token enumeration of multi-head attention on ``C×H×W`` maps."""
    c = q_map.shape[0]
    tq = q_map.reshape(c, -1).T
    tk = kv_map.reshape(kv_map.shape[0], -1).T
    d = wq.shape[1] // heads
    q, k, v = tq @ wq, tk @ wk, tk @ wv
    out = np.zeros((len(tq), wq.shape[1]))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(len(tq)):
            scores = np.array([q[i, sl] @ k[j, sl] / np.sqrt(d) for j in range(len(tk))])
            w = softmax_rows(scores)
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(len(tk)))
    y = out @ wo
    return y.T.reshape((wo.shape[1],) + q_map.shape[1:])


# -- data level ----------------------------------------------------------------


def test_data_level_concat(rng):
    rgb = rng.normal(size=(3, 4, 4))
    assert np.array_equal(data_level_concat([rgb]), rgb)
    parts = [rng.normal(size=(3, 4, 4)) for _ in range(3)]
    out = data_level_concat(parts)
    assert out.shape == (9, 4, 4)
    assert np.array_equal(out[3:6], parts[1])
    with pytest.raises(T.ShapeError):
        data_level_concat([rgb, rng.normal(size=(3, 4, 5))])


# -- conv ----------------------------------------------------------------------


def test_conv_selector_kernel(rng):
    layer = ConvFuse(2, 3, rng)
    w = np.zeros((3, 6, 1, 1))
    w[np.arange(3), np.arange(3), 0, 0] = 1.0
    layer.proj.weight.data[...] = w
    layer.proj.bias.data[...] = 0
    a, b = T.Tensor(rng.normal(size=(3, 4, 4))), T.Tensor(rng.normal(size=(3, 4, 4)))
    np.testing.assert_array_equal(conv_fuse([a, b], layer).data, a.data)


def test_conv_zero_kernel(rng):
    layer = ConvFuse(3, 2, rng)
    layer.proj.weight.data[...] = 0
    feats = [T.Tensor(rng.normal(size=(2, 3, 3))) for _ in range(3)]
    assert not conv_fuse(feats, layer).data.any()


def test_conv_matches_per_pixel_oracle(rng):
    layer = ConvFuse(2, 3, rng)
    randomize(layer, rng)
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    out = conv_fuse([T.Tensor(a), T.Tensor(b)], layer).data
    w = layer.proj.weight.data[:, :, 0, 0]
    stacked = np.concatenate([a, b])
    for y in range(4):
        for x in range(5):
            np.testing.assert_allclose(out[:, y, x], w @ stacked[:, y, x] + layer.proj.bias.data, atol=1e-12)


# -- stacked attention ---------------------------------------------------------


def test_stacked_single_token(rng):
    layer = StackedAttention(2, 2, 1, rng)
    randomize(layer, rng)
    a, b = rng.normal(size=(2, 1, 1)), rng.normal(size=(2, 1, 1))
    out = stacked_attention_fuse([T.Tensor(a), T.Tensor(b)], layer).data
    v = np.concatenate([a, b])[:, 0, 0] @ layer.w_v.weight.data
    np.testing.assert_allclose(out[:, 0, 0], v @ layer.w_o.weight.data, atol=1e-12)


def test_stacked_matches_dense_oracle(rng):
    layer = StackedAttention(2, 2, 2, rng)
    randomize(layer, rng)
    f = rng.normal(size=(2, 2, 2))
    out = stacked_attention_fuse([T.Tensor(f), T.Tensor(f)], layer).data
    st = np.concatenate([f, f])
    ref = dense_attention(st, st, layer.w_q.weight.data, layer.w_k.weight.data, layer.w_v.weight.data,
                          layer.w_o.weight.data, 2)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_stacked_gradient(rng):
    layer = StackedAttention(2, 2, 1, rng)
    randomize(layer, rng)
    a, b = T.Tensor(rng.normal(size=(2, 2, 2))), T.Tensor(rng.normal(size=(2, 2, 2)))
    w = T.Tensor(rng.normal(size=(2, 2, 2)))
    loss = lambda: T.tensor_sum(T.mul(stacked_attention_fuse([a, b], layer), w))
    assert T.grad_check(loss, [a, b] + layer.parameters()) < 1e-4


# -- cross attention -----------------------------------------------------------


def test_cross_constant_aux_collapses(rng):
    layer = CrossAttention(4, 2, rng, zero_out=False)
    randomize(layer, rng)
    const = rng.normal(size=4)
    aux = np.broadcast_to(const[:, None, None], (4, 3, 3)).copy()
    out = cross_attention_fuse(T.Tensor(rng.normal(size=(4, 3, 3))), T.Tensor(aux), layer).data
    expected = const @ layer.w_v.weight.data @ layer.w_o.weight.data
    np.testing.assert_allclose(out, np.broadcast_to(expected[:, None, None], out.shape), atol=1e-12)


def test_cross_zero_output_projection(rng):
    layer = CrossAttention(4, 2, rng)
    out = cross_attention_fuse(T.Tensor(rng.normal(size=(4, 2, 2))), T.Tensor(rng.normal(size=(4, 2, 2))), layer)
    assert np.array_equal(out.data, np.zeros((4, 2, 2)))


def test_cross_matches_dense_oracle(rng):
    layer = CrossAttention(3, 1, rng, zero_out=False)
    randomize(layer, rng)
    q, kv = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2, 2))
    out = cross_attention_fuse(T.Tensor(q), T.Tensor(kv), layer).data
    ref = dense_attention(q, kv, layer.w_q.weight.data, layer.w_k.weight.data, layer.w_v.weight.data,
                          layer.w_o.weight.data, 1)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_cross_projections_are_independent(rng):
    layer = CrossAttention(4, 2, rng)
    ws = [layer.w_q.weight, layer.w_k.weight, layer.w_v.weight]
    assert all(not np.array_equal(a.data, b.data) for i, a in enumerate(ws) for b in ws[i + 1:])
    assert len({id(w) for w in ws}) == 3


# -- residual combination ------------------------------------------------------


def test_residual_identity_path(rng):
    f_rgb = T.Tensor(rng.normal(size=(3, 2, 2)))
    zero = T.Tensor(np.zeros((3, 2, 2)))
    out = residual_combine(f_rgb, [zero], [zero], nn.Conv2d(3, 3, 1, rng, init="identity"))
    np.testing.assert_array_equal(out.data, f_rgb.data)


def test_residual_with_zero_cross_attention(rng):
    conv = nn.Conv2d(3, 3, 1, rng)
    fr, f1, f2 = (T.Tensor(rng.normal(size=(3, 2, 2))) for _ in range(3))
    cross = [CrossAttention(3, 1, rng) for _ in range(2)]
    primes = [cross_attention_fuse(fr, f, c) for f, c in zip((f1, f2), cross)]
    out = residual_combine(fr, [f1, f2], primes, conv)
    ref = T.conv2d(T.Tensor(fr.data + f1.data + f2.data), conv.weight, conv.bias)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-12)


def test_residual_random_recomputation(rng):
    conv = nn.Conv2d(3, 3, 1, rng)
    maps = [rng.normal(size=(3, 2, 2)) for _ in range(5)]
    out = residual_combine(T.Tensor(maps[0]), [T.Tensor(maps[1]), T.Tensor(maps[2])],
                           [T.Tensor(maps[3]), T.Tensor(maps[4])], conv).data
    total = sum(maps)
    ref = np.einsum("oc,chw->ohw", conv.weight.data[:, :, 0, 0], total) + conv.bias.data[:, None, None]
    np.testing.assert_allclose(out, ref, atol=1e-12)


# -- full module ---------------------------------------------------------------


def pyramid(rng, shapes, modality, batch=None):
    lead = () if batch is None else (batch,)
    return FeaturePyramid([T.Tensor(rng.normal(size=lead + s)) for s in shapes], modality, [4, 8])


SHAPES = [(4, 4, 4), (8, 2, 2)]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_single_rgb_bundle_bypasses(strategy, rng):
    fusion = Fusion(FusionConfig(strategy), ["rgb"], [4, 8], rng)
    pyr = pyramid(rng, SHAPES, "rgb")
    out = fusion(ModalityBundle({"rgb": pyr}))
    assert fusion.parameters() == []
    assert all(a.data is b.data or np.array_equal(a.data, b.data) for a, b in zip(out.maps, pyr.maps))


@pytest.mark.parametrize("strategy", [s for s in STRATEGIES if s != "data_level"])
def test_every_strategy_keeps_rgb_shapes(strategy, rng):
    mods = ["rgb", "ndvi", "nir"]
    fusion = Fusion(FusionConfig(strategy, heads=2), mods, [4, 8], rng)
    bundle = ModalityBundle({m: pyramid(rng, SHAPES, m, batch=2) for m in mods})
    out = fusion(bundle)
    assert out.shapes() == bundle.pyramids["rgb"].shapes()


def test_residual_cross_attn_starts_as_sum(rng):
    fusion = Fusion(FusionConfig("residual_cross_attn"), ["rgb", "ndvi"], [4, 8], rng)
    rgb, ndvi = pyramid(rng, SHAPES, "rgb"), pyramid(rng, SHAPES, "ndvi")
    out = fusion(ModalityBundle({"rgb": rgb, "ndvi": ndvi}))
    for o, a, b in zip(out.maps, rgb.maps, ndvi.maps):
        np.testing.assert_allclose(o.data, a.data + b.data, atol=1e-12)


def test_rgb_required_for_cross_strategies():
    with pytest.raises(FusionError):
        check_compatible("residual_cross_attn", ["ndvi", "nir"])
    check_compatible("conv", ["ndvi", "nir"])
    with pytest.raises(FusionError):
        FusionConfig("bogus")


@pytest.mark.parametrize("strategy", [s for s in STRATEGIES if s != "data_level"])
def test_full_fusion_gradient(strategy, rng):
    fusion = Fusion(FusionConfig(strategy, heads=1), ["rgb", "ndvi"], [2], rng)
    randomize(fusion, rng)
    feats = {m: T.Tensor(rng.normal(size=(2, 2, 2))) for m in ("rgb", "ndvi")}
    w = T.Tensor(rng.normal(size=(2, 2, 2)))

    def loss():
        out = fusion(ModalityBundle({m: FeaturePyramid([f], m, [4]) for m, f in feats.items()}))
        return T.tensor_sum(T.mul(out.maps[0], w))

    assert T.grad_check(loss, list(feats.values()) + fusion.parameters()) < 1e-4
