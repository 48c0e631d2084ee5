"""Multimodal samples: container format, instance extraction, splitting and synthesis."""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"MMRS"
VERSION = 1
CHECKSUM_BYTES = 8
MAX_SIDE = 1 << 15
MAX_PIXELS = 1 << 26
_HEADER = struct.Struct("<4sBIIH")
_TAG_LEN = struct.Struct("<I")

REFERENCE_TRAIN_FRACTION = 717 / 855  # 717 train of 855 labelled scenes


class ContainerError(ValueError):
    """Base class for malformed sample containers."""


class BadMagicError(ContainerError):
    pass


class DimensionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class NaNPlaneError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class SampleInvariantError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sample type


@dataclass(eq=False)
class MultimodalSample:
    rgb: np.ndarray  # 3×H×W in [0, 1]
    ndvi: np.ndarray  # 1×H×W in [-1, 1]
    nir: np.ndarray  # 1×H×W, nonnegative
    instance_mask: np.ndarray  # H×W, 0 = background, ids 1..n
    region: str = ""
    meta: dict = field(default_factory=dict)  # not serialised

    @property
    def shape(self) -> tuple[int, int]:
        return self.instance_mask.shape

    @property
    def num_instances(self) -> int:
        return int(self.instance_mask.max()) if self.instance_mask.size else 0

    @property
    def boxes(self) -> np.ndarray:
        return instance_boxes(self.instance_mask)

    def masks(self) -> np.ndarray:
        """``n×H×W`` boolean per-instance masks."""
        ids = np.arange(1, self.num_instances + 1)
        return self.instance_mask[None] == ids[:, None, None]

    def plane(self, modality: str) -> np.ndarray:
        if modality not in ("rgb", "ndvi", "nir"):
            raise ValueError(f"unknown modality {modality!r}")
        return getattr(self, modality)

    def targets(self) -> dict:
        """Ground truth in the layout the instance head trains on."""
        n = self.num_instances
        return {"boxes": self.boxes, "labels": np.ones(n, dtype=np.int64), "masks": self.masks()}

    def validate(self) -> None:
        h, w = self.instance_mask.shape
        if self.rgb.shape != (3, h, w) or self.ndvi.shape != (1, h, w) or self.nir.shape != (1, h, w):
            raise SampleInvariantError(
                f"plane shapes {self.rgb.shape}, {self.ndvi.shape}, {self.nir.shape} disagree with mask {(h, w)}"
            )
        for name in ("rgb", "ndvi", "nir"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise SampleInvariantError(f"non-finite values in {name}")
        if self.rgb.min(initial=0) < 0 or self.rgb.max(initial=0) > 1:
            raise SampleInvariantError("rgb outside [0, 1]")
        if self.ndvi.min(initial=0) < -1 or self.ndvi.max(initial=0) > 1:
            raise SampleInvariantError("ndvi outside [-1, 1]")
        if self.nir.min(initial=0) < 0:
            raise SampleInvariantError("negative nir")
        n = self.num_instances
        if self.instance_mask.min(initial=0) < 0:
            raise SampleInvariantError("negative instance id")
        present = np.unique(self.instance_mask)
        present = present[present > 0]
        if not np.array_equal(present, np.arange(1, n + 1)):
            raise SampleInvariantError(f"instance ids not contiguous from 1: {present.tolist()}")

    def content_hash(self) -> str:
        return hashlib.sha256(encode_sample(self)).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultimodalSample):
            return NotImplemented
        return encode_sample(self) == encode_sample(other)


def instance_boxes(instance_mask: np.ndarray) -> np.ndarray:
    """Tight ``(x1, y1, x2, y2)`` per id; pixel ``(r, c)`` spans ``[c, c+1]``."""
    n = int(instance_mask.max()) if instance_mask.size else 0
    out = np.zeros((n, 4), dtype=np.float64)
    for i, sl in enumerate(ndimage.find_objects(instance_mask.astype(np.int64), max_label=n)):
        if sl is None:
            raise SampleInvariantError(f"instance id {i + 1} has no pixels")
        out[i] = (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
    return out


# ---------------------------------------------------------------------------
# container


def encode_sample(sample: MultimodalSample) -> bytes:
    """Serialise to the MMRS container, with a trailing 8-byte BLAKE2b checksum."""
    sample.validate()
    h, w = sample.instance_mask.shape
    n = sample.num_instances
    if h > MAX_SIDE or w > MAX_SIDE or h * w > MAX_PIXELS:
        raise DimensionError(f"{h}x{w} exceeds container limits")
    if n > 0xFFFF:
        raise DimensionError(f"{n} instances exceed u16")
    tag = sample.region.encode("utf-8")
    parts = [
        _HEADER.pack(MAGIC, VERSION, h, w, n),
        np.concatenate([sample.rgb, sample.ndvi, sample.nir]).astype("<f4").tobytes(),
        sample.instance_mask.astype("<u2").tobytes(),
        _TAG_LEN.pack(len(tag)),
        tag,
    ]
    body = b"".join(parts)
    return body + hashlib.blake2b(body, digest_size=CHECKSUM_BYTES).digest()


def decode_sample(buf: bytes) -> MultimodalSample:
    buf = bytes(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedError(f"header needs {_HEADER.size} bytes, got {len(buf)}")
    _, version, h, w, n = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise BadMagicError(f"unsupported version {version}")
    if h == 0 or w == 0 or h > MAX_SIDE or w > MAX_SIDE or h * w > MAX_PIXELS:
        raise DimensionError(f"declared dimensions {h}x{w} out of range")
    plane_bytes = 5 * h * w * 4
    id_bytes = h * w * 2
    off = _HEADER.size
    need = off + plane_bytes + id_bytes + _TAG_LEN.size
    if len(buf) < need:
        raise TruncatedError(f"payload needs {need} bytes before the tag, got {len(buf)}")
    (tag_len,) = _TAG_LEN.unpack_from(buf, off + plane_bytes + id_bytes)
    end = need + tag_len
    if len(buf) < end + CHECKSUM_BYTES:
        raise TruncatedError(f"container needs {end + CHECKSUM_BYTES} bytes, got {len(buf)}")
    if len(buf) > end + CHECKSUM_BYTES:
        raise ContainerError(f"{len(buf) - end - CHECKSUM_BYTES} trailing bytes")
    if hashlib.blake2b(buf[:end], digest_size=CHECKSUM_BYTES).digest() != buf[end:]:
        raise ChecksumError("container checksum mismatch")
    planes = np.frombuffer(buf, dtype="<f4", count=5 * h * w, offset=off).reshape(5, h, w).astype(np.float32)
    if not np.all(np.isfinite(planes)):
        raise NaNPlaneError("non-finite plane values")
    ids = np.frombuffer(buf, dtype="<u2", count=h * w, offset=off + plane_bytes).reshape(h, w).astype(np.int32)
    try:
        tag = buf[need:end].decode("utf-8")
    except UnicodeDecodeError as e:
        raise ContainerError(f"region tag is not UTF-8: {e}") from None
    sample = MultimodalSample(planes[:3], planes[3:4], planes[4:5], ids, tag)
    if sample.num_instances != n:
        raise ContainerError(f"header declares {n} instances, id plane has {sample.num_instances}")
    try:
        sample.validate()
    except SampleInvariantError as e:
        raise ContainerError(str(e)) from None
    return sample


def save_sample(sample: MultimodalSample, path) -> None:
    _atomic_write(Path(path), encode_sample(sample))


def load_sample(path) -> MultimodalSample:
    return decode_sample(Path(path).read_bytes())


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# instances from binary masks

_EIGHT = np.ones((3, 3), dtype=bool)


def mask_to_instances(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """8-connected components of a binary mask.

    Ids follow the row-major position of each component's first pixel.
    Returns the ``H×W`` id plane and ``n×4`` tight boxes.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n:
        # force first-encounter numbering regardless of the labeller's internals
        flat = labels.ravel()
        _, first = np.unique(flat, return_index=True)
        ids_in_order = flat[np.sort(first)]
        ids_in_order = ids_in_order[ids_in_order > 0]
        remap = np.zeros(n + 1, dtype=np.int32)
        remap[ids_in_order] = np.arange(1, n + 1)
        labels = remap[labels]
    labels = labels.astype(np.int32)
    return labels, instance_boxes(labels)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthConfig:
    height: int = 128
    width: int = 128
    rgb_ambiguity: float = 0.5
    max_blobs: int = 5
    min_radius: float = 0.06  # fraction of the shorter side
    max_radius: float = 0.16
    gap: int = 2
    regions: int = 3
    distractor_prob: float = 0.5
    ndvi_drop: tuple = (0.2, 0.5)
    nir_drop: tuple = (0.08, 0.25)
    rgb_contrast: tuple = (0.08, 0.2)
    placement_retries: int = 50

    def __post_init__(self) -> None:
        if not 0.0 <= self.rgb_ambiguity <= 1.0:
            raise ValueError("rgb_ambiguity must be in [0, 1]")
        if self.height < 16 or self.width < 16:
            raise ValueError("scenes must be at least 16x16")


# per-region appearance: (soil rgb, vegetation rgb, base ndvi, base nir)
_REGION_STYLES = [
    ((0.45, 0.36, 0.26), (0.30, 0.42, 0.22), 0.55, 0.45),
    ((0.50, 0.44, 0.35), (0.36, 0.46, 0.28), 0.45, 0.40),
    ((0.40, 0.33, 0.28), (0.26, 0.38, 0.20), 0.62, 0.50),
    ((0.52, 0.40, 0.30), (0.34, 0.40, 0.25), 0.40, 0.38),
]


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    z = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return z / max(z.std(), 1e-12)


def _blob_shape(rng: np.random.Generator, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Elliptical or teardrop region centred at ``(cy, cx)`` with mean radius ``r``."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    theta = rng.uniform(0, np.pi)
    aspect = rng.uniform(0.55, 1.0)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    a = r / math.sqrt(aspect)
    b = r * math.sqrt(aspect)
    if rng.random() < 0.5:
        # teardrop: cross-section narrows toward +u
        taper = rng.uniform(0.3, 0.7)
        b_u = b * np.clip(1.0 - taper * (u / a), 0.05, None)
        return (u / a) ** 2 + (v / b_u) ** 2 <= 1.0
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _place(rng: np.random.Generator, cfg: SynthConfig, occupied: np.ndarray) -> np.ndarray | None:
    h, w = occupied.shape
    side = min(h, w)
    grown = ndimage.binary_dilation(occupied, _EIGHT, iterations=cfg.gap) if occupied.any() else occupied
    for _ in range(cfg.placement_retries):
        r = rng.uniform(cfg.min_radius, cfg.max_radius) * side
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        shape = _blob_shape(rng, h, w, cy, cx, r)
        if shape.sum() < 12:
            continue
        # components must stay single and clear of image borders
        if shape[0].any() or shape[-1].any() or shape[:, 0].any() or shape[:, -1].any():
            continue
        if (shape & grown).any():
            continue
        if ndimage.label(shape, structure=_EIGHT)[1] != 1:
            continue
        return shape
    return None


def synth_scene(cfg: SynthConfig, seed: int, index: int = 0) -> MultimodalSample:
    """One scene, fully determined by ``(seed, index)``."""
    rng = np.random.default_rng([int(seed), int(index)])
    h, w = cfg.height, cfg.width
    region_id = int(rng.integers(cfg.regions))
    soil, veg, ndvi0, nir0 = _REGION_STYLES[region_id % len(_REGION_STYLES)]
    soil, veg = np.asarray(soil)[:, None, None], np.asarray(veg)[:, None, None]
    side = min(h, w)

    # smooth background: vegetation/soil mixture drives all three modalities
    cover = 1.0 / (1.0 + np.exp(-2.5 * _smooth_noise(rng, (h, w), side / 10)))
    texture = _smooth_noise(rng, (h, w), 1.5)
    rgb = veg * cover + soil * (1 - cover) + 0.03 * texture + 0.015 * rng.normal(size=(3, h, w))
    ndvi = ndvi0 + 0.5 * (cover - 0.5) + 0.05 * _smooth_noise(rng, (h, w), 2.0) + 0.04 * rng.normal(size=(h, w))
    nir = nir0 + 0.3 * (cover - 0.5) + 0.05 * _smooth_noise(rng, (h, w), 2.0) + 0.04 * rng.normal(size=(h, w))

    ids = np.zeros((h, w), dtype=np.int32)
    occupied = np.zeros((h, w), dtype=bool)
    n_target = int(rng.integers(1, cfg.max_blobs + 1))
    ambiguous = []
    for _ in range(n_target):
        shape = _place(rng, cfg, occupied)
        if shape is None:
            break
        occupied |= shape
        k = len(ambiguous) + 1
        ids[shape] = k
        soft = ndimage.gaussian_filter(shape.astype(np.float64), 0.7)
        hidden = bool(rng.random() < cfg.rgb_ambiguity)
        ambiguous.append(hidden)
        if not hidden:
            c = rng.uniform(*cfg.rgb_contrast)
            # exposed soil: brighter, redder
            rgb = rgb + c * soft * np.array([1.0, 0.7, 0.45])[:, None, None]
        ndvi = ndvi - rng.uniform(*cfg.ndvi_drop) * soft * (1 + 0.15 * rng.normal(size=(h, w)))
        nir = nir - rng.uniform(*cfg.nir_drop) * soft * (1 + 0.3 * rng.normal(size=(h, w)))

    # unlabelled distractors, each mimicking slumps in some modalities only:
    # ponds (dark, low NDVI, very low NIR), bright rock (RGB only) and
    # sparse vegetation (low NDVI, NIR unchanged)
    for kind in ("pond", "rock", "sparse"):
        if rng.random() >= cfg.distractor_prob:
            continue
        shape = _place(rng, cfg, occupied)
        if shape is None:
            continue
        occupied |= shape
        soft = ndimage.gaussian_filter(shape.astype(np.float64), 0.7)
        if kind == "pond":
            rgb = rgb - 0.15 * soft
            ndvi = ndvi - 0.6 * soft
            nir = nir - 0.8 * nir * soft
        elif kind == "rock":
            rgb = rgb + rng.uniform(*cfg.rgb_contrast) * soft * np.array([1.0, 0.7, 0.45])[:, None, None]
        else:
            ndvi = ndvi - rng.uniform(*cfg.ndvi_drop) * soft

    sample = MultimodalSample(
        np.clip(rgb, 0, 1).astype(np.float32),
        np.clip(ndvi, -1, 1)[None].astype(np.float32),
        np.clip(nir, 0, None)[None].astype(np.float32),
        ids,
        f"region-{region_id}",
        {"seed": int(seed), "index": int(index), "rgb_hidden": ambiguous},
    )
    sample.validate()
    return sample


def synth_generate(n: int, height: int = 128, width: int = 128, rgb_ambiguity: float = 0.5,
                   seed: int = 0, **overrides) -> list[MultimodalSample]:
    """``n`` scenes; scene ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = SynthConfig(height=height, width=width, rgb_ambiguity=rgb_ambiguity, **overrides)
    return [synth_scene(cfg, seed, i) for i in range(n)]


# ---------------------------------------------------------------------------
# manifests and splitting


@dataclass
class DatasetManifest:
    records: list  # dicts {path, split, region, seed}
    warnings: list = field(default_factory=list)

    def region_counts(self) -> dict:
        out: dict = {}
        for r in self.records:
            out[r["region"]] = out.get(r["region"], 0) + 1
        return dict(sorted(out.items()))

    def split_counts(self) -> dict:
        out = {"train": 0, "test": 0}
        for r in self.records:
            if r.get("split") in out:
                out[r["split"]] += 1
        return out

    def subset(self, split: str) -> list:
        return [r for r in self.records if r.get("split") == split]

    def to_json(self) -> str:
        return json.dumps({"records": self.records, "warnings": self.warnings}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls(list(doc["records"]), list(doc.get("warnings", [])))

    def save(self, path) -> None:
        _atomic_write(Path(path), self.to_json().encode())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def _largest_remainder(counts: list[int], fraction: float) -> list[int]:
    total = int(round(sum(counts) * fraction))
    quotas = [c * fraction for c in counts]
    base = [int(math.floor(q)) for q in quotas]
    rem = total - sum(base)
    order = sorted(range(len(counts)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[: max(rem, 0)]:
        base[i] += 1
    return base


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int = 0) -> DatasetManifest:
    """Stratified per-region train/test split.

    Regions get train counts by largest-remainder apportionment of the global
    total; a region with at least two samples keeps at least one sample in each
    split.  Single-sample regions go to train with a warning.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    by_region: dict = {}
    for i, r in enumerate(manifest.records):
        by_region.setdefault(r["region"], []).append(i)
    regions = sorted(by_region)
    counts = [len(by_region[g]) for g in regions]
    quotas = _largest_remainder(counts, train_fraction)
    records = [dict(r) for r in manifest.records]
    notes = list(manifest.warnings)
    rng = np.random.default_rng(seed)
    for g, n, q in zip(regions, counts, quotas):
        idx = by_region[g]
        if n == 1:
            msg = f"region {g!r} has a single sample; assigned to train"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
            q = 1
        else:
            q = min(max(q, 1), n - 1)
        perm = rng.permutation(n)
        for rank, j in enumerate(perm):
            records[idx[j]]["split"] = "train" if rank < q else "test"
    return DatasetManifest(records, notes)


def write_dataset(samples, out_dir, seed: int | None = None, prefix: str = "scene") -> DatasetManifest:
    """Write one container per sample plus an unsplit manifest listing them."""
    out_dir = Path(out_dir)
    records = []
    for i, s in enumerate(samples):
        name = f"{prefix}_{i:05d}.mmrs"
        save_sample(s, out_dir / name)
        records.append({"path": name, "split": None, "region": s.region,
                        "seed": s.meta.get("seed", seed)})
    return DatasetManifest(records)


def load_split(manifest: DatasetManifest, root, split: str) -> list[MultimodalSample]:
    root = Path(root)
    return [load_sample(root / r["path"]) for r in manifest.subset(split)]
