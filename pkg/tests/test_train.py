import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rtsfuse import tensor as T
from rtsfuse.accounting import count_params
from rtsfuse.data import synth_generate
from rtsfuse.model import ModelConfig, Pipeline
from rtsfuse.train import (
    AdamW,
    CheckpointError,
    ConfigHashMismatch,
    OptimizerState,
    PhasePlan,
    adamw_step,
    checkpoint_from_model,
    decode_checkpoint,
    encode_checkpoint,
    finetune_multimodal,
    load_checkpoint,
    param_checksums,
    pretrain_unimodal,
    save_checkpoint,
    scale_lr,
    train_full,
    train_model,
)

ENCODER = dict(patch_size=4, stage_channels=(8, 16), stage_depths=(1, 1), heads_per_stage=(2, 2),
               pool_stride_kv=(2, 1))
HEAD = dict(channels=8, box_hidden=16)


def toy_config(mods=("rgb",), strategy="residual_cross_attn"):
    return ModelConfig(mods, ENCODER, dict(strategy=strategy), HEAD)


@pytest.fixture(scope="module")
def scenes():
    return synth_generate(16, 32, 32, seed=4)


# -- AdamW ---------------------------------------------------------------------


def test_zero_gradient_zero_decay_is_fixed_point():
    p = T.Parameter(np.array([1.5, -2.0]))
    state = OptimizerState(lr=0.1, weight_decay=0.0)
    adamw_step(state, [p], [np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_one_scalar_step_closed_form():
    with T.precision(np.float64):
        p = T.Parameter(np.array([0.7]))
        state = OptimizerState(lr=0.1)
        adamw_step(state, [p], [np.array([1.0])])
    # bias-corrected moments are both exactly 1 after one step with g = 1
    expected = 0.7 * (1 - 0.1 * state.weight_decay) - 0.1 * 1.0 / (1.0 + state.eps)
    assert abs(p.data[0] - expected) < 1e-12


def test_decoupled_decay_with_zero_gradient():
    with T.precision(np.float64):
        p = T.Parameter(np.array([3.0, -1.25]))
        adamw_step(OptimizerState(lr=0.01, weight_decay=0.3), [p], [np.zeros(2)])
    np.testing.assert_array_equal(p.data, np.array([3.0, -1.25]) * (1 - 0.01 * 0.3))


def test_non_finite_gradient_raises():
    from rtsfuse.train import DivergenceError

    with pytest.raises(DivergenceError):
        adamw_step(OptimizerState(lr=0.1), [T.Parameter(np.ones(2))], [np.array([np.inf, 0.0])])


def test_scale_lr_examples():
    assert scale_lr(1e-4, 2, 2) == 1e-4
    assert scale_lr(1e-4, 2, 4) == 2e-4
    with pytest.raises(ValueError):
        scale_lr(1e-4, 0, 2)


@given(st.floats(1e-8, 1.0), st.integers(1, 512), st.integers(1, 512))
def test_scale_lr_proportional(lr, base, actual):
    got = scale_lr(lr, base, actual)
    assert abs(got - lr * actual / base) <= np.spacing(lr * actual / base)


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    model = Pipeline(toy_config(), rng)
    path = tmp_path / "m.mmck"
    save_checkpoint(checkpoint_from_model(model), path)
    back = load_checkpoint(path, expected_hash=model.config.hash())
    assert back.checksums() == checkpoint_from_model(model).checksums()
    assert encode_checkpoint(back) == path.read_bytes()


def test_checkpoint_hash_guard(tmp_path, rng):
    model = Pipeline(toy_config(), rng)
    save_checkpoint(checkpoint_from_model(model), tmp_path / "m.mmck")
    other = ModelConfig(("rgb",), dict(ENCODER, stage_channels=(8, 24)), head=HEAD)
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(tmp_path / "m.mmck", expected_hash=other.hash())


def test_checkpoint_byte_flips_are_detected(rng):
    from rtsfuse.train import Checkpoint

    ck = Checkpoint({"a.w": rng.normal(size=3).astype(np.float32), "b": np.zeros(1, np.float32)},
                    {"a.w": True, "b": False}, bytes(range(32)))
    buf = encode_checkpoint(ck)
    for i in range(len(buf)):
        bad = bytearray(buf)
        bad[i] ^= 1 << (i % 8)
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(bad))
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf[:-1])


# -- training ------------------------------------------------------------------


def test_zero_epochs_keep_initialisation(scenes):
    cfg = toy_config()
    init = Pipeline(cfg, np.random.default_rng([3, 0]))
    _, ckpt, log = pretrain_unimodal("rgb", scenes, cfg, PhasePlan(epochs=0), 3)
    assert ckpt.checksums() == checkpoint_from_model(init).checksums()
    assert log.epochs == []


def test_same_seed_same_checkpoint(scenes):
    plan = PhasePlan(epochs=1, base_lr=1e-3, max_steps=4)
    a = pretrain_unimodal("ndvi", scenes, toy_config(), plan, 9)[1]
    b = pretrain_unimodal("ndvi", scenes, toy_config(), plan, 9)[1]
    assert encode_checkpoint(a) == encode_checkpoint(b)


def test_loss_falls_over_fifty_steps():
    data = synth_generate(24, 32, 32, seed=6)
    drops = []
    for seed in range(5):
        _, _, log = train_full(data, toy_config(), PhasePlan(epochs=10, base_lr=1e-3, max_steps=51,
                                                            val_fraction=0.0), seed)
        drops.append(log.steps[50][1] - log.steps[0][1])
    assert np.median(drops) < 0


def test_total_freeze_changes_nothing(scenes, rng):
    model = Pipeline(toy_config(), rng)
    model.set_frozen(model.groups())
    assert AdamW(model.parameters(), 1e-3).params == []
    before = param_checksums(model)
    train_model(model, scenes[:4], [], PhasePlan(epochs=1, base_lr=1e-3, select_best=False), 0)
    assert param_checksums(model) == before


@pytest.fixture(scope="module")
def pretrained(scenes):
    plan = PhasePlan(epochs=1, base_lr=1e-3, max_steps=3)
    return {m: pretrain_unimodal(m, scenes, toy_config(), plan, 1)[1] for m in ("rgb", "ndvi", "nir")}


def test_backbone_freeze_counts(pretrained, scenes):
    cfg = toy_config(("rgb", "ndvi", "nir"))
    plan = PhasePlan("finetune", epochs=1, base_lr=1e-3, max_steps=2)
    model, _, _ = finetune_multimodal(pretrained, cfg, scenes, plan, 0)
    rep = count_params(model)
    assert rep.trainable == rep.group_total("fusion") + rep.group_total("head")
    assert rep.frozen == sum(rep.group_total(g) for g in model.backbone_groups())


def test_finetune_leaves_backbones_bit_identical(pretrained, scenes):
    cfg = toy_config(("rgb", "ndvi"))
    plan = PhasePlan("finetune", epochs=20, base_lr=1e-3, max_steps=20)
    model, ckpt, log = finetune_multimodal({m: pretrained[m] for m in ("rgb", "ndvi")}, cfg, scenes, plan, 0)
    for m in ("rgb", "ndvi"):
        assert {n: h for n, h in ckpt.checksums().items() if n.startswith(f"backbone.{m}.")} == \
            {n: h for n, h in pretrained[m].checksums().items() if n.startswith(f"backbone.{m}.")}
    assert len(log.steps) == 20
    init = checkpoint_from_model(Pipeline(cfg, np.random.default_rng([0, 0])))
    assert any(not np.array_equal(a, init.params[n]) for n, a in ckpt.group("fusion").items())


def test_single_modality_finetune_only_moves_head(pretrained, scenes):
    cfg = toy_config(("rgb",))
    plan = PhasePlan("finetune", epochs=1, base_lr=1e-3, max_steps=3)
    _, ckpt, _ = finetune_multimodal({"rgb": pretrained["rgb"]}, cfg, scenes, plan, 0)
    before, after = pretrained["rgb"].checksums(), ckpt.checksums()
    changed = {n.split(".")[0] for n in after if after[n] != before[n]}
    assert changed == {"head"}


def test_finetune_guards(pretrained, scenes):
    plan = PhasePlan("finetune", epochs=1)
    with pytest.raises(KeyError):
        finetune_multimodal({"rgb": pretrained["rgb"]}, toy_config(("rgb", "ndvi")), scenes, plan, 0)
    wrong = ModelConfig(("rgb", "ndvi"), dict(ENCODER, stage_channels=(8, 24)), head=HEAD)
    with pytest.raises(ConfigHashMismatch):
        finetune_multimodal({m: pretrained[m] for m in ("rgb", "ndvi")}, wrong, scenes, plan, 0)
    with pytest.raises(ValueError):
        finetune_multimodal(pretrained, toy_config(("rgb", "ndvi", "nir"), "data_level"), scenes, plan, 0)
    with pytest.raises(ValueError):
        PhasePlan("pretrain", freeze=("backbone.rgb",))
