"""Optimizer, checkpoints and the two-phase (pretrain, then frozen fine-tune) schedule."""

from __future__ import annotations

import hashlib
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .head import compute_losses
from .metrics import ap50, predictions_from_detections
from .model import ModelConfig, Pipeline, group_of

log = logging.getLogger(__name__)

DEFAULT_BASE_LR = 1e-4
DEFAULT_BASE_BATCH = 2
DEFAULT_EPOCHS = 36
DEFAULT_WEIGHT_DECAY = 0.05


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient during training."""

    def __init__(self, step: int, what: str) -> None:
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class CheckpointError(ValueError):
    """Corrupt or malformed checkpoint."""


class ConfigHashMismatch(CheckpointError):
    """Checkpoint was written for a different architecture."""


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    def moment_elements(self) -> int:
        return int(sum(a.size for a in self.m))


def adamw_step(state: OptimizerState, params, grads) -> None:
    """One in-place AdamW update with decoupled weight decay.

    ``p <- p·(1 - lr·wd)`` is applied before the bias-corrected Adam step, so a
    zero gradient leaves only the decay.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(state.step, "gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        d = p.data
        d *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        d -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Holds the trainable parameter list; frozen parameters never enter it."""

    def __init__(self, params, lr: float, weight_decay: float = DEFAULT_WEIGHT_DECAY,
                 betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimizerState(lr, betas[0], betas[1], weight_decay, eps)

    def step(self) -> None:
        if self.params:
            adamw_step(self.state, self.params, [p.grad for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def scale_lr(base_lr: float, base_batch: int, actual_batch: int) -> float:
    """Linear scaling rule."""
    if base_batch <= 0 or actual_batch <= 0:
        raise ValueError("batch sizes must be positive")
    if base_lr <= 0:
        raise ValueError("base learning rate must be positive")
    return base_lr * actual_batch / base_batch


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1
_ENTRY_HEAD = struct.Struct("<H")
_ENTRY_META = struct.Struct("<BQ")


@dataclass
class Checkpoint:
    params: dict  # name -> float32 array
    frozen: dict  # name -> bool
    config_hash: bytes

    def checksums(self) -> dict:
        return {n: hashlib.sha256(np.ascontiguousarray(a, dtype="<f4").tobytes()).hexdigest()
                for n, a in self.params.items()}

    def group(self, prefix: str) -> dict:
        return {n: a for n, a in self.params.items() if group_of(n) == prefix}


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def checkpoint_from_model(model: Pipeline) -> Checkpoint:
    return Checkpoint(
        {n: p.data.astype(np.float32, copy=True) for n, p in model.named_parameters()},
        {n: not p.requires_grad for n, p in model.named_parameters()},
        model.config.hash(),
    )


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + bytes([CKPT_VERSION]) + ckpt.config_hash)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        nb = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entry = _ENTRY_HEAD.pack(len(nb)) + nb + _ENTRY_META.pack(int(bool(ckpt.frozen.get(name, False))),
                                                                  arr.size) + payload
        buf.write(entry + _digest(entry))
    body = buf.getvalue()
    return body + _digest(body)


def decode_checkpoint(data: bytes, shapes: dict | None = None) -> Checkpoint:
    """Parse and verify a checkpoint; ``shapes`` (name -> shape) restores array shapes."""
    data = bytes(data)
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    if len(data) < 4 + 1 + 32 + 4 + 8:
        raise CheckpointError("checkpoint truncated in header")
    if _digest(data[:-8]) != data[-8:]:
        raise CheckpointError("checkpoint file checksum mismatch")
    body = data[:-8]
    if body[4] != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {body[4]}")
    config_hash = body[5:37]
    (count,) = struct.unpack_from("<I", body, 37)
    off = 41
    params, frozen = {}, {}
    for _ in range(count):
        start = off
        if off + 2 > len(body):
            raise CheckpointError("checkpoint truncated in entry header")
        (nlen,) = _ENTRY_HEAD.unpack_from(body, off)
        off += 2
        name = body[off : off + nlen].decode("utf-8", errors="strict")
        off += nlen
        if off + _ENTRY_META.size > len(body):
            raise CheckpointError("checkpoint truncated in entry metadata")
        flag, n = _ENTRY_META.unpack_from(body, off)
        off += _ENTRY_META.size
        end = off + 4 * n
        if end + 8 > len(body):
            raise CheckpointError(f"checkpoint truncated in payload of {name!r}")
        if _digest(body[start:end]) != body[end : end + 8]:
            raise CheckpointError(f"checksum mismatch for {name!r}")
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).astype(np.float32)
        if shapes is not None and name in shapes:
            arr = arr.reshape(shapes[name])
        params[name] = arr
        frozen[name] = bool(flag)
        off = end + 8
    if off != len(body):
        raise CheckpointError(f"{len(body) - off} unexpected trailing bytes")
    return Checkpoint(params, frozen, config_hash)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    from .data import _atomic_write

    _atomic_write(Path(path), encode_checkpoint(ckpt))


def load_checkpoint(path, expected_hash: bytes | None = None, shapes: dict | None = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes(), shapes)
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        raise ConfigHashMismatch(
            f"checkpoint config hash {ckpt.config_hash.hex()[:16]} != expected {expected_hash.hex()[:16]}"
        )
    return ckpt


def apply_checkpoint(model: Pipeline, ckpt: Checkpoint, groups=None, rename=None) -> None:
    """Copy parameters from ``ckpt`` into ``model`` (optionally only some groups).

    ``rename`` maps a checkpoint group prefix to a model group prefix.
    """
    own = dict(model.named_parameters())
    rename = rename or {}
    wanted = None if groups is None else set(groups)
    used = 0
    for name, arr in ckpt.params.items():
        g = group_of(name)
        target_g = rename.get(g, g)
        if wanted is not None and target_g not in wanted:
            continue
        target = target_g + name[len(g):]
        if target not in own:
            raise KeyError(f"checkpoint parameter {name!r} has no counterpart {target!r} in the model")
        p = own[target]
        if arr.size != p.size:
            raise ValueError(f"size mismatch for {target}: {arr.size} vs {p.size}")
        p.data[...] = arr.reshape(p.shape)
        used += 1
    if used == 0:
        raise KeyError(f"checkpoint has no parameters for groups {sorted(wanted or [])}")


def param_checksums(model: Pipeline, groups=None) -> dict:
    return {
        n: hashlib.sha256(p.data.tobytes()).hexdigest()
        for n, p in model.named_parameters()
        if groups is None or group_of(n) in groups
    }


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PhasePlan:
    phase: str = "pretrain"  # pretrain | finetune
    epochs: int = DEFAULT_EPOCHS
    base_lr: float = DEFAULT_BASE_LR
    base_batch: int = DEFAULT_BASE_BATCH
    batch_size: int = DEFAULT_BASE_BATCH
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    freeze: tuple = ()
    val_fraction: float = 0.1
    max_steps: int | None = None
    warm_start_head: bool = True
    select_best: bool = True

    def __post_init__(self) -> None:
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.phase == "pretrain" and self.freeze:
            raise ValueError("pretraining freezes nothing")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        self.freeze = tuple(self.freeze)

    @property
    def lr(self) -> float:
        return scale_lr(self.base_lr, self.base_batch, self.batch_size)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # (step, total, cls, box, mask)
    epochs: list = field(default_factory=list)  # (epoch, mean loss, val ap50)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return {"steps": self.steps, "epochs": self.epochs, "best_epoch": self.best_epoch}


def evaluate_model(model: Pipeline, samples, batch_size: int = 4, kind: str = "mask",
                   pyramids=None) -> tuple[float, list, list]:
    """AP50 of ``model`` on ``samples``; also returns per-image predictions and ground truth."""
    preds, gts = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        pyr = None if pyramids is None else _slice_pyramids(pyramids, i, i + len(chunk))
        dets = model.predict(chunk, pyr)
        for s, d in zip(chunk, dets):
            h, w = s.shape
            preds.append(predictions_from_detections(d, h, w, kind))
            gts.append(list(s.masks()) if kind == "mask" else list(s.boxes))
    return ap50(preds, gts), preds, gts


def _slice_pyramids(cache: dict, lo: int, hi: int) -> dict:
    from .encoder import FeaturePyramid

    return {m: FeaturePyramid([T.Tensor(a[lo:hi]) for a in maps], m, strides)
            for m, (maps, strides) in cache.items()}


def cache_pyramids(model: Pipeline, samples, batch_size: int = 8) -> dict:
    """Encode every sample once through (frozen) backbones; arrays per level."""
    out: dict = {}
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            pyr = model.encode_modalities(samples[i : i + batch_size])
            for m, p in pyr.items():
                entry = out.setdefault(m, ([[] for _ in p.maps], list(p.strides)))
                for lvl, t in enumerate(p.maps):
                    entry[0][lvl].append(t.data)
    return {m: ([np.concatenate(chunks) for chunks in maps], strides) for m, (maps, strides) in out.items()}


def _take_pyramids(cache: dict, idx) -> dict:
    from .encoder import FeaturePyramid

    return {m: FeaturePyramid([T.Tensor(a[idx]) for a in maps], m, strides) for m, (maps, strides) in cache.items()}


def train_model(model: Pipeline, train, val, plan: PhasePlan, seed: int, use_cache: bool = False,
                on_epoch=None) -> TrainLog:
    """Train in place; on return the model holds the selected (best-val-AP50) weights.

    With ``use_cache`` the backbones must be frozen; their pyramids are
    computed once and reused.
    """
    opt = AdamW(model.parameters(), plan.lr, plan.weight_decay)
    rng = np.random.default_rng([seed, 1])
    logbook = TrainLog()
    if use_cache:
        trainable_backbone = [g for g in model.backbone_groups() if g not in model.frozen_groups()]
        if trainable_backbone:
            raise ValueError(f"feature caching needs frozen backbones, {trainable_backbone} are trainable")
        cache = cache_pyramids(model, train)
        val_cache = cache_pyramids(model, val) if val else None
    else:
        cache = val_cache = None
    best_ap, best_state = -1.0, None
    step = 0
    n = len(train)
    for epoch in range(plan.epochs):
        order = np.random.default_rng([seed, 2, epoch]).permutation(n)
        losses = []
        for b in range(0, n, plan.batch_size):
            if plan.max_steps is not None and step >= plan.max_steps:
                break
            idx = order[b : b + plan.batch_size]
            batch = [train[i] for i in idx]
            pyr = _take_pyramids(cache, idx) if cache is not None else None
            inp = model.forward_train(batch, rng, pyr)
            cls, box, mask = compute_losses(inp)
            total = T.add(T.add(cls, box), mask)
            vals = (float(total.data), float(cls.data), float(box.data), float(mask.data))
            if not all(math.isfinite(v) for v in vals):
                raise DivergenceError(step, "loss")
            opt.zero_grad()
            if total.requires_grad:
                T.backward(total)
            opt.step()
            logbook.steps.append((step,) + vals)
            losses.append(vals[0])
            step += 1
        val_ap = None
        if val:
            val_ap, _, _ = evaluate_model(model, val, pyramids=val_cache)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        logbook.epochs.append((epoch, mean_loss, val_ap))
        log.info("epoch %d loss %.4f val_ap50 %s", epoch, mean_loss, val_ap)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, val_ap)
        score = val_ap if val_ap is not None else 0.0
        if not plan.select_best or score >= best_ap:
            best_ap, best_state = score, model.state_dict()
            logbook.best_epoch = epoch
        if plan.max_steps is not None and step >= plan.max_steps:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return logbook


def split_validation(samples, fraction: float, seed: int):
    """Hold out ``fraction`` of ``samples`` (at least one when fraction > 0)."""
    if fraction <= 0 or len(samples) < 2:
        return list(samples), []
    k = max(1, int(round(len(samples) * fraction)))
    perm = np.random.default_rng([seed, 3]).permutation(len(samples))
    val = [samples[i] for i in sorted(perm[:k])]
    train = [samples[i] for i in sorted(perm[k:])]
    return train, val


def pretrain_unimodal(modality: str, samples, cfg: ModelConfig, plan: PhasePlan, seed: int,
                      on_epoch=None) -> tuple[Pipeline, Checkpoint, TrainLog]:
    """Train encoder and head on one modality; keep the best-validation-AP50 epoch."""
    if plan.phase != "pretrain":
        raise ValueError("pretrain_unimodal needs a pretrain plan")
    ucfg = cfg if cfg.modalities == (modality,) else cfg.unimodal(modality)
    model = Pipeline(ucfg, np.random.default_rng([seed, 0]))
    train, val = split_validation(samples, plan.val_fraction, seed)
    logbook = train_model(model, train, val, plan, seed, on_epoch=on_epoch)
    return model, checkpoint_from_model(model), logbook


def train_full(samples, cfg: ModelConfig, plan: PhasePlan, seed: int, on_epoch=None):
    """Train every parameter of a (possibly data-level, multi-input) pipeline from scratch."""
    model = Pipeline(cfg, np.random.default_rng([seed, 0]))
    train, val = split_validation(samples, plan.val_fraction, seed)
    logbook = train_model(model, train, val, plan, seed, on_epoch=on_epoch)
    return model, checkpoint_from_model(model), logbook


def freeze_backbone(model: Pipeline, checkpoints: dict) -> list[str]:
    """Load each modality's backbone from its checkpoint and freeze it.

    Returns the frozen group names.
    """
    groups = []
    for m in model.config.modalities:
        if m not in checkpoints:
            raise KeyError(f"no checkpoint for modality {m!r}")
        g = f"backbone.{m}"
        if g not in model.backbone_groups():
            raise KeyError(f"model has no backbone group {g!r}")
        if not checkpoints[m].group(g):
            raise KeyError(f"checkpoint for {m!r} has no {g!r} parameters")
        apply_checkpoint(model, checkpoints[m], groups=[g])
        groups.append(g)
    model.set_frozen(groups)
    return groups


def finetune_multimodal(checkpoints: dict, cfg: ModelConfig, samples, plan: PhasePlan, seed: int,
                        on_epoch=None) -> tuple[Pipeline, Checkpoint, TrainLog]:
    """Frozen pretrained backbones, trainable fusion and head."""
    if plan.phase != "finetune":
        raise ValueError("finetune_multimodal needs a finetune plan")
    if cfg.data_level:
        raise ValueError("data-level fusion has no pretrained per-modality backbones; use train_full")
    extra = set(checkpoints) - set(cfg.modalities)
    if extra:
        raise KeyError(f"checkpoints for modalities not in the model: {sorted(extra)}")
    for m in cfg.modalities:
        if m not in checkpoints:
            raise KeyError(f"no checkpoint for modality {m!r}")
        if checkpoints[m].config_hash != cfg.unimodal(m).hash():
            raise ConfigHashMismatch(f"checkpoint for {m!r} was trained with a different architecture")
    model = Pipeline(cfg, np.random.default_rng([seed, 0]))
    frozen = freeze_backbone(model, checkpoints)
    expected = set(model.backbone_groups())
    if plan.freeze and set(plan.freeze) != expected:
        raise ValueError(f"plan freezes {sorted(plan.freeze)}, backbones are {sorted(expected)}")
    if plan.warm_start_head:
        src = checkpoints.get("rgb", checkpoints[cfg.modalities[0]])
        apply_checkpoint(model, src, groups=["head"])
    train, val = split_validation(samples, plan.val_fraction, seed)
    logbook = train_model(model, train, val, plan, seed, use_cache=True, on_epoch=on_epoch)
    ckpt = checkpoint_from_model(model)
    assert all(ckpt.frozen[n] for n in ckpt.params if group_of(n) in frozen)
    return model, ckpt, logbook
