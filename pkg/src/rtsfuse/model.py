"""End-to-end pipeline: per-modality encoders, fusion, instance head."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .encoder import MODALITIES, Encoder, EncoderConfig, FeaturePyramid, normalize_and_duplicate
from .fusion import Fusion, FusionConfig, ModalityBundle, check_compatible, data_level_concat
from .head import Detection, HeadConfig, InstanceHead, LossInputs

DATA_LEVEL_KEY = "data"


@dataclass
class ModelConfig:
    modalities: tuple = ("rgb",)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self) -> None:
        self.modalities = tuple(self.modalities)
        if not self.modalities:
            raise ValueError("modality list is empty")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ValueError(f"unknown modality {m!r}; choose from {MODALITIES}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"duplicate modalities: {self.modalities}")
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        check_compatible(self.fusion.strategy, self.modalities)

    @property
    def data_level(self) -> bool:
        return self.fusion.strategy == "data_level" and len(self.modalities) > 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def unimodal(self, modality: str) -> "ModelConfig":
        """The single-modality configuration whose backbone this model reuses."""
        return ModelConfig((modality,), self.encoder, FusionConfig(self.fusion.strategy, self.fusion.heads,
                                                                   self.fusion.conv_init), self.head)

    def hash(self) -> bytes:
        """32-byte digest of everything that fixes parameter names and shapes."""
        doc = self.to_dict()
        if len(self.modalities) == 1:
            doc["fusion"] = None  # fusion is bypassed, so it cannot affect parameters
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).digest()


def stack_inputs(samples, modality: str) -> np.ndarray:
    """``B×3×H×W`` normalised input for one modality."""
    planes = np.stack([s.plane(modality) for s in samples])
    return normalize_and_duplicate(planes, modality)


class Pipeline(nn.Module):
    """Encoders (one per modality, or one widened encoder for data-level fusion),
    a fusion module and the instance head.

    Parameter names start with ``backbone.<modality>``, ``fusion`` or ``head``.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        if cfg.data_level:
            enc_cfg = dataclasses.replace(cfg.encoder, in_channels=3 * len(cfg.modalities))
            self.backbone = {DATA_LEVEL_KEY: Encoder(enc_cfg, rng)}
        else:
            self.backbone = {m: Encoder(cfg.encoder, rng) for m in cfg.modalities}
        self.fusion = Fusion(cfg.fusion, cfg.modalities, cfg.encoder.stage_channels, rng)
        self.head = InstanceHead(cfg.head, cfg.encoder.stage_channels, cfg.encoder.strides(), rng)
        self._cfg = cfg

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def groups(self) -> dict[str, list[str]]:
        """Parameter names per group (``backbone.<m>``, ``fusion``, ``head``)."""
        out: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            out.setdefault(group_of(name), []).append(name)
        return out

    def backbone_groups(self) -> list[str]:
        return [f"backbone.{k}" for k in self.backbone]

    def set_frozen(self, groups) -> None:
        groups = set(groups)
        known = set(self.groups()) | set(self.backbone_groups()) | {"fusion", "head"}
        unknown = groups - known
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        for name, p in self.named_parameters():
            p.requires_grad = group_of(name) not in groups

    def frozen_groups(self) -> list[str]:
        frozen = []
        params = dict(self.named_parameters())
        for g, names in self.groups().items():
            if all(not params[n].requires_grad for n in names):
                frozen.append(g)
        return frozen

    # -- forward ------------------------------------------------------------

    def prepare_inputs(self, samples) -> dict[str, T.Tensor]:
        """Normalised ``B×C×H×W`` input tensor per backbone."""
        if self._cfg.data_level:
            x = data_level_concat([stack_inputs(samples, m) for m in self._cfg.modalities])
            return {DATA_LEVEL_KEY: T.Tensor(x)}
        return {m: T.Tensor(stack_inputs(samples, m)) for m in self._cfg.modalities}

    def encode_modalities(self, samples, inputs: dict | None = None) -> dict[str, FeaturePyramid]:
        """Per-backbone pyramids for a batch of samples."""
        if inputs is None:
            inputs = self.prepare_inputs(samples)
        return {k: self.backbone[k](x, k) for k, x in inputs.items()}

    def fuse(self, pyramids: dict) -> FeaturePyramid:
        return self.fusion(ModalityBundle(dict(pyramids)))

    def forward_train(self, samples, rng: np.random.Generator, pyramids: dict | None = None) -> LossInputs:
        if pyramids is None:
            pyramids = self.encode_modalities(samples)
        fused = self.fuse(pyramids)
        return self.head.forward_train(fused.maps, [s.targets() for s in samples], samples[0].shape, rng)

    def predict(self, samples, pyramids: dict | None = None) -> list[list[Detection]]:
        with T.no_grad():
            if pyramids is None:
                pyramids = self.encode_modalities(samples)
            fused = self.fuse(pyramids)
            return self.head.forward_infer(fused.maps, samples[0].shape)

    def forward(self, samples) -> list[list[Detection]]:
        return self.predict(samples)


def group_of(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] == "backbone" else parts[0]
