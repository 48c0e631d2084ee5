"""Simplified cascade detection and mask decoder.

Box convention: ``(x1, y1, x2, y2)`` in continuous pixel coordinates, where
pixel ``(r, c)`` covers ``[c, c+1] × [r, r+1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import nn
from . import tensor as T
from .tensor import Tensor

DELTA_CLAMP = math.log(1000.0 / 16)
DEFAULT_STAGE_STDS = (
    (0.1, 0.1, 0.2, 0.2),
    (0.05, 0.05, 0.1, 0.1),
    (0.033, 0.033, 0.067, 0.067),
)


# ---------------------------------------------------------------------------
# configuration and value types


@dataclass
class CascadeConfig:
    num_stages: int = 2
    iou_thresholds: tuple = (0.5, 0.6)
    delta_stds: tuple = DEFAULT_STAGE_STDS[:2]

    def __post_init__(self) -> None:
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        if len(self.delta_stds) < self.num_stages:
            self.delta_stds = tuple(DEFAULT_STAGE_STDS[: self.num_stages])
        self.delta_stds = tuple(tuple(float(v) for v in s) for s in self.delta_stds[: self.num_stages])
        if self.num_stages < 1:
            raise ValueError("cascade needs at least one stage")
        if len(self.iou_thresholds) != self.num_stages:
            raise ValueError(
                f"{self.num_stages} stages but {len(self.iou_thresholds)} IoU thresholds"
            )
        if any(b <= a for a, b in zip(self.iou_thresholds, self.iou_thresholds[1:])):
            raise ValueError(f"IoU thresholds must increase across stages: {self.iou_thresholds}")


@dataclass
class HeadConfig:
    channels: int = 32
    num_classes: int = 1
    anchor_sizes: tuple = (8, 16, 32)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    pre_nms_topk: int = 300
    post_nms_topk_train: int = 64
    post_nms_topk_test: int = 100
    rpn_nms: float = 0.7
    rois_per_image: int = 32
    roi_pos_fraction: float = 0.25
    box_hidden: int = 128
    pool_size: int = 7
    mask_size: int = 14
    canonical_box_size: float = 32.0
    score_threshold: float = 0.05
    final_nms: float = 0.5
    max_detections: int = 20
    with_mask: bool = True
    cascade: CascadeConfig = field(default_factory=CascadeConfig)

    def __post_init__(self) -> None:
        if isinstance(self.cascade, dict):
            self.cascade = CascadeConfig(**self.cascade)
        if not self.anchor_sizes or not self.anchor_ratios:
            raise ValueError("anchor sizes and ratios must be nonempty")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_sizes) * len(self.anchor_ratios)


@dataclass
class Anchor:
    cx: float
    cy: float
    width: float
    height: float
    level: int


@dataclass
class AnchorSet:
    """Anchors as arrays; ordered level-major, then row-major, then (size, ratio)."""

    boxes: np.ndarray  # N×4
    levels: np.ndarray  # N

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, i: int) -> Anchor:
        x1, y1, x2, y2 = self.boxes[i]
        return Anchor((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, int(self.levels[i]))


@dataclass
class Proposal:
    box: np.ndarray
    score: float


@dataclass
class Detection:
    box: np.ndarray
    class_id: int
    confidence: float
    mask_probs: np.ndarray | None = field(default=None, repr=False)  # mask_size × mask_size probabilities over the box

    def mask(self, height: int, width: int) -> np.ndarray:
        """Binary full-image mask (``prob > 0.5``), zero outside the box."""
        if self.mask_probs is None:
            return box_to_mask(self.box, height, width)
        return paste_mask(self.mask_probs, self.box, height, width)


# ---------------------------------------------------------------------------
# box arithmetic


def box_area(b: np.ndarray) -> np.ndarray:
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix (len(a) × len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def encode_boxes(ref: np.ndarray, target: np.ndarray, stds=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Deltas taking ``ref`` boxes to ``target`` boxes, divided by ``stds``."""
    ref = np.asarray(ref, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    tw, th = target[:, 2] - target[:, 0], target[:, 3] - target[:, 1]
    tx, ty = target[:, 0] + 0.5 * tw, target[:, 1] + 0.5 * th
    d = np.stack([(tx - rx) / rw, (ty - ry) / rh, np.log(tw / rw), np.log(th / rh)], axis=1)
    return d / np.asarray(stds)


def decode_boxes(ref: np.ndarray, deltas: np.ndarray, stds=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; width/height deltas clamp at ln(1000/16)."""
    deltas = np.asarray(deltas, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(ref) != len(deltas):
        raise ValueError(f"{len(ref)} reference boxes but {len(deltas)} deltas")
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite box deltas")
    d = deltas * np.asarray(stds)
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    cx, cy = rx + d[:, 0] * rw, ry + d[:, 1] * rh
    w = rw * np.exp(np.minimum(d[:, 2], DELTA_CLAMP))
    h = rh * np.exp(np.minimum(d[:, 3], DELTA_CLAMP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(b: np.ndarray, height: int, width: int) -> np.ndarray:
    out = b.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending-score order.

    Ties in score are broken by ascending index.  A box is suppressed when its
    IoU with a kept box is at least ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = box_iou(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] >= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def generate_anchors(level_shapes, strides, sizes, ratios) -> AnchorSet:
    """One anchor per (cell, size, ratio) per level, centred on cell centres.

    ``ratio`` is height/width; anchor area equals ``size²``.
    """
    if not len(sizes) or not len(ratios):
        raise ValueError("anchor sizes and ratios must be nonempty")
    base = []
    for s in sizes:
        for r in ratios:
            w = s / math.sqrt(r)
            h = s * math.sqrt(r)
            base.append((-w / 2, -h / 2, w / 2, h / 2))
    base = np.asarray(base)
    boxes, levels = [], []
    for lvl, ((h, w), stride) in enumerate(zip(level_shapes, strides)):
        ys, xs = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
        centers = np.stack([xs.ravel(), ys.ravel(), xs.ravel(), ys.ravel()], axis=1)
        b = (centers[:, None, :] + base[None, :, :]).reshape(-1, 4)
        boxes.append(b)
        levels.append(np.full(len(b), lvl, dtype=np.int64))
    return AnchorSet(np.concatenate(boxes), np.concatenate(levels))


# ---------------------------------------------------------------------------
# RoI feature extraction


def assign_levels(boxes: np.ndarray, num_levels: int, canonical_size: float) -> np.ndarray:
    """Pyramid level per box: level 0 below ``canonical_size``, +1 per doubling."""
    scale = np.sqrt(np.maximum(box_area(boxes), 1e-12))
    lvl = np.floor(np.log2(scale / canonical_size + 1e-8)) + 1
    return np.clip(lvl, 0, num_levels - 1).astype(np.int64)


def _bilinear_matrix(boxes, batch_idx, levels, level_shapes, strides, col_offsets, out_size, n_cols):
    """Sparse (R·out²)×n_cols matrix sampling one point per output cell."""
    r = len(boxes)
    g = (np.arange(out_size) + 0.5) / out_size
    rows, cols, vals = [], [], []
    row_base = np.arange(r)[:, None, None] * out_size * out_size + (
        np.arange(out_size)[:, None] * out_size + np.arange(out_size)[None, :]
    )[None]
    for lvl, ((h, w), stride) in enumerate(zip(level_shapes, strides)):
        sel = np.nonzero(levels == lvl)[0]
        if sel.size == 0:
            continue
        b = boxes[sel]
        sx = b[:, 0:1] + g[None, :] * (b[:, 2:3] - b[:, 0:1])  # R_l × out (x samples)
        sy = b[:, 1:2] + g[None, :] * (b[:, 3:4] - b[:, 1:2])
        u = sx / stride - 0.5
        v = sy / stride - 0.5
        # per-axis interpolation: (index0, index1, weight0, weight1, valid)
        def axis(c, n):
            valid = (c >= -1.0) & (c <= n)
            c = np.clip(c, 0, n - 1)
            i0 = np.floor(c).astype(np.int64)
            i1 = np.minimum(i0 + 1, n - 1)
            frac = c - i0
            return i0, i1, 1.0 - frac, frac, valid

        x0, x1, wx0, wx1, vx = axis(u, w)
        y0, y1, wy0, wy1, vy = axis(v, h)
        base_col = col_offsets[lvl] + batch_idx[sel][:, None, None] * h * w
        rb = row_base[sel]
        valid = vy[:, :, None] & vx[:, None, :]
        for yi, wy in ((y0, wy0), (y1, wy1)):
            for xi, wx in ((x0, wx0), (x1, wx1)):
                wt = wy[:, :, None] * wx[:, None, :] * valid
                c = base_col + yi[:, :, None] * w + xi[:, None, :]
                rows.append(rb.ravel())
                cols.append(c.ravel())
                vals.append(wt.ravel())
    if rows:
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(r * out_size * out_size, n_cols))


def roi_pool(maps, boxes, batch_idx=None, strides=None, out_size: int = 7,
             canonical_size: float = 32.0, levels=None) -> Tensor:
    """Bilinearly sample ``out_size²`` points per box from its pyramid level.

    ``maps`` are ``B×C×H×W`` tensors (or a single ``C×H×W``); the result is
    ``R×C×out×out``.
    """
    maps = [m if m.ndim == 4 else T.reshape(m, (1,) + m.shape) for m in maps]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise ValueError("degenerate RoI box")
    r = len(boxes)
    batch_idx = np.zeros(r, dtype=np.int64) if batch_idx is None else np.asarray(batch_idx, dtype=np.int64)
    if strides is None:
        strides = [1] * len(maps)
    if levels is None:
        levels = assign_levels(boxes, len(maps), canonical_size)
    bsz, c = maps[0].shape[:2]
    shapes = [m.shape[2:] for m in maps]
    sizes = [bsz * h * w for h, w in shapes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])[:-1]
    flat = T.concat(
        [T.reshape(T.transpose(m, (0, 2, 3, 1)), (n, c)) for m, n in zip(maps, sizes)], axis=0
    ) if len(maps) > 1 else T.reshape(T.transpose(maps[0], (0, 2, 3, 1)), (sizes[0], c))
    mat = _bilinear_matrix(boxes, batch_idx, levels, shapes, strides, offsets, out_size, int(sum(sizes)))
    mat = mat.astype(maps[0].dtype)
    out = T.sparse_matmul(mat, flat)
    out = T.reshape(out, (r, out_size, out_size, c))
    return T.transpose(out, (0, 3, 1, 2))


def box_to_mask(box, height: int, width: int) -> np.ndarray:
    m = np.zeros((height, width), dtype=bool)
    x1, y1, x2, y2 = box
    cols = (np.arange(width) + 0.5)
    rows = (np.arange(height) + 0.5)
    m[np.ix_((rows > y1) & (rows < y2), (cols > x1) & (cols < x2))] = True
    return m


def paste_mask(probs: np.ndarray, box, height: int, width: int) -> np.ndarray:
    """Resample a box-relative probability grid onto the image; ``> 0.5`` is foreground."""
    x1, y1, x2, y2 = (float(v) for v in box)
    out = np.zeros((height, width), dtype=bool)
    c0, c1 = max(int(math.floor(x1)), 0), min(int(math.ceil(x2)), width)
    r0, r1 = max(int(math.floor(y1)), 0), min(int(math.ceil(y2)), height)
    if c1 <= c0 or r1 <= r0:
        return out
    m = probs.shape[0]
    px = np.arange(c0, c1) + 0.5
    py = np.arange(r0, r1) + 0.5
    inside_x = (px > x1) & (px < x2)
    inside_y = (py > y1) & (py < y2)
    gx = np.clip((px - x1) / (x2 - x1) * m - 0.5, 0, m - 1)
    gy = np.clip((py - y1) / (y2 - y1) * m - 0.5, 0, m - 1)
    ix0 = np.floor(gx).astype(int)
    iy0 = np.floor(gy).astype(int)
    ix1 = np.minimum(ix0 + 1, m - 1)
    iy1 = np.minimum(iy0 + 1, m - 1)
    fx, fy = gx - ix0, gy - iy0
    p = (
        probs[np.ix_(iy0, ix0)] * ((1 - fy)[:, None] * (1 - fx)[None, :])
        + probs[np.ix_(iy0, ix1)] * ((1 - fy)[:, None] * fx[None, :])
        + probs[np.ix_(iy1, ix0)] * (fy[:, None] * (1 - fx)[None, :])
        + probs[np.ix_(iy1, ix1)] * (fy[:, None] * fx[None, :])
    )
    out[r0:r1, c0:c1] = (p > 0.5) & inside_y[:, None] & inside_x[None, :]
    return out


def mask_targets(gt_mask: np.ndarray, boxes: np.ndarray, size: int) -> np.ndarray:
    """Sample a binary image mask at ``size²`` cell centres inside each box."""
    h, w = gt_mask.shape
    g = (np.arange(size) + 0.5) / size
    out = np.zeros((len(boxes), size, size), dtype=np.float64)
    for i, (x1, y1, x2, y2) in enumerate(boxes):
        xs = np.clip(np.floor(x1 + g * (x2 - x1)).astype(int), 0, w - 1)
        ys = np.clip(np.floor(y1 + g * (y2 - y1)).astype(int), 0, h - 1)
        out[i] = gt_mask[np.ix_(ys, xs)]
    return out


# ---------------------------------------------------------------------------
# network pieces


class Neck(nn.Module):
    """1×1 laterals to a common width plus a top-down pathway."""

    def __init__(self, in_channels, c: int, rng: np.random.Generator) -> None:
        self.lateral = [nn.Conv2d(ci, c, 1, rng) for ci in in_channels]

    def forward(self, maps) -> list[Tensor]:
        lat = [layer(m) for layer, m in zip(self.lateral, maps)]
        out = [lat[-1]]
        for m in reversed(lat[:-1]):
            out.insert(0, T.add(m, T.upsample_nearest(out[0], 2)))
        return out


class RPNHead(nn.Module):
    def __init__(self, c: int, anchors_per_cell: int, rng: np.random.Generator) -> None:
        self.conv = nn.Conv2d(c, c, 3, rng)
        self.objectness = nn.Conv2d(c, anchors_per_cell, 1, rng)
        self.deltas = nn.Conv2d(c, 4 * anchors_per_cell, 1, rng)
        self.objectness.weight.data[...] *= 0.1
        self.deltas.weight.data[...] *= 0.01
        self._a = anchors_per_cell

    def forward(self, maps) -> tuple[Tensor, Tensor]:
        """Per-anchor logits ``B×N`` and deltas ``B×N×4`` in anchor order."""
        logits, deltas = [], []
        for m in maps:
            b, _, h, w = m.shape
            t = T.relu(self.conv(m))
            o = T.transpose(self.objectness(t), (0, 2, 3, 1))
            logits.append(T.reshape(o, (b, h * w * self._a)))
            d = T.transpose(self.deltas(t), (0, 2, 3, 1))
            deltas.append(T.reshape(d, (b, h * w * self._a, 4)))
        if len(maps) == 1:
            return logits[0], deltas[0]
        return T.concat(logits, axis=1), T.concat(deltas, axis=1)


class BoxHead(nn.Module):
    def __init__(self, c: int, pool: int, hidden: int, num_classes: int, rng: np.random.Generator) -> None:
        self.fc = nn.Linear(c * pool * pool, hidden, rng)
        self.cls = nn.Linear(hidden, num_classes + 1, rng, std=0.01)
        self.reg = nn.Linear(hidden, 4, rng, std=0.001)

    def forward(self, roi_feats: Tensor) -> tuple[Tensor, Tensor]:
        r = roi_feats.shape[0]
        x = T.relu(self.fc(T.reshape(roi_feats, (r, -1))))
        return self.cls(x), self.reg(x)


class MaskHead(nn.Module):
    def __init__(self, c: int, num_classes: int, rng: np.random.Generator) -> None:
        self.conv1 = nn.Conv2d(c, c, 3, rng)
        self.conv2 = nn.Conv2d(c, c, 3, rng)
        self.predictor = nn.Conv2d(c, num_classes, 1, rng)

    def forward(self, roi_feats: Tensor) -> Tensor:
        x = T.relu(self.conv1(roi_feats))
        x = T.upsample_nearest(x, 2)
        x = T.relu(self.conv2(x))
        return self.predictor(x)


def mask_predict(roi_feats: Tensor, head: MaskHead) -> Tensor:
    """Per-class mask logits ``R×K×2p×2p`` for pooled ``R×C×p×p`` features."""
    return head(roi_feats)


def rpn_forward(maps, head: RPNHead) -> tuple[Tensor, Tensor]:
    return head(maps)


def proposals_from_rpn(anchors: AnchorSet, logits: np.ndarray, deltas: np.ndarray,
                       image_size, pre_nms: int, post_nms: int, nms_iou: float) -> list[Proposal]:
    """Decode, clip, NMS and keep the top ``post_nms`` proposals of one image."""
    h, w = image_size
    scores = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    order = np.lexsort((np.arange(len(scores)), -scores))[:pre_nms]
    boxes = clip_boxes(decode_boxes(anchors.boxes[order], deltas[order]), h, w)
    s = scores[order]
    ok = ((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0)
    boxes, s = boxes[ok], s[ok]
    keep = nms(boxes, s, nms_iou)[:post_nms]
    return [Proposal(boxes[i], float(s[i])) for i in keep]


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossInputs:
    """Predictions paired with their training targets.

    Per cascade stage: class logits ``R×(K+1)`` with integer labels, box deltas
    ``R×4`` with encoded targets and a positive mask.  Mask logits are already
    restricted to the ground-truth class channel of positive RoIs.
    """

    cls_logits: list
    cls_labels: list
    box_deltas: list
    box_targets: list
    box_positive: list
    mask_logits: Tensor | None = None
    mask_targets: np.ndarray | None = None
    rpn_logits: Tensor | None = None
    rpn_labels: np.ndarray | None = None
    rpn_deltas: Tensor | None = None
    rpn_targets: np.ndarray | None = None
    rpn_normalizer: float = 1.0


def _zero_like(t: Tensor) -> Tensor:
    return T.mul(T.tensor_sum(t), 0.0)


def compute_losses(inp: LossInputs) -> tuple[Tensor, Tensor, Tensor]:
    """Classification, box-regression and mask losses.

    * class: softmax cross-entropy per stage plus RPN objectness BCE;
    * box: smooth-L1 on positive RoIs' encoded deltas (normalised by the
      number of sampled RoIs) plus RPN box loss;
    * mask: per-pixel BCE on positive RoIs.
    Terms without positives contribute 0.
    """
    cls_terms, box_terms = [], []
    for logits, labels, deltas, targets, pos in zip(
        inp.cls_logits, inp.cls_labels, inp.box_deltas, inp.box_targets, inp.box_positive
    ):
        cls_terms.append(T.cross_entropy(logits, labels))
        pos = np.asarray(pos, dtype=bool)
        idx = np.nonzero(pos)[0]
        if idx.size:
            box_terms.append(
                T.smooth_l1(T.take_rows(deltas, idx), np.asarray(targets)[idx], beta=1.0,
                            normalizer=max(len(pos), 1))
            )
        else:
            box_terms.append(_zero_like(deltas))
    if inp.rpn_logits is not None:
        cls_terms.append(T.bce_with_logits(inp.rpn_logits, inp.rpn_labels))
        if inp.rpn_deltas is not None and inp.rpn_deltas.shape[0] > 0:
            box_terms.append(
                T.smooth_l1(inp.rpn_deltas, inp.rpn_targets, beta=1.0 / 9, normalizer=inp.rpn_normalizer)
            )
    cls = cls_terms[0]
    for t in cls_terms[1:]:
        cls = T.add(cls, t)
    box = box_terms[0]
    for t in box_terms[1:]:
        box = T.add(box, t)
    if inp.mask_logits is not None and inp.mask_logits.shape[0] > 0:
        mask = T.bce_with_logits(inp.mask_logits, inp.mask_targets)
    elif inp.mask_logits is not None:
        mask = _zero_like(inp.mask_logits)
    else:
        mask = T.mul(T.tensor_sum(cls), 0.0)
    return cls, box, mask


# ---------------------------------------------------------------------------
# the head


def _label_rois(boxes, gt_boxes, gt_labels, thr):
    """Matched gt index (-1 for none) and class label (0 = background)."""
    if len(gt_boxes) == 0:
        return np.full(len(boxes), -1), np.zeros(len(boxes), dtype=np.int64)
    ious = box_iou(boxes, gt_boxes)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(boxes)), best]
    fg = best_iou >= thr
    matched = np.where(fg, best, -1)
    labels = np.where(fg, np.asarray(gt_labels)[best], 0).astype(np.int64)
    return matched, labels


class InstanceHead(nn.Module):
    """Neck, RPN, cascade box heads and a mask head."""

    def __init__(self, cfg: HeadConfig, in_channels, strides, rng: np.random.Generator) -> None:
        self.neck = Neck(in_channels, cfg.channels, rng)
        self.rpn = RPNHead(cfg.channels, cfg.anchors_per_cell, rng)
        self.box_heads = [
            BoxHead(cfg.channels, cfg.pool_size, cfg.box_hidden, cfg.num_classes, rng)
            for _ in range(cfg.cascade.num_stages)
        ]
        self.mask_head = MaskHead(cfg.channels, cfg.num_classes, rng) if cfg.with_mask else None
        self._cfg = cfg
        self._strides = list(strides)
        self._anchor_cache: dict = {}

    @property
    def config(self) -> HeadConfig:
        return self._cfg

    def anchors(self, level_shapes) -> AnchorSet:
        key = tuple(level_shapes)
        a = self._anchor_cache.get(key)
        if a is None:
            a = generate_anchors(level_shapes, self._strides, self._cfg.anchor_sizes, self._cfg.anchor_ratios)
            self._anchor_cache[key] = a
        return a

    def _pool(self, feats, boxes, bidx) -> Tensor:
        return roi_pool(feats, boxes, bidx, self._strides, self._cfg.pool_size, self._cfg.canonical_box_size)

    # -- training ---------------------------------------------------------

    def _rpn_targets(self, anchors: AnchorSet, gt_boxes, rng):
        cfg = self._cfg
        n = len(anchors)
        labels = np.full(n, -1, dtype=np.int64)
        matched = np.zeros(n, dtype=np.int64)
        if len(gt_boxes):
            ious = box_iou(anchors.boxes, gt_boxes)
            best = ious.argmax(axis=1)
            best_iou = ious[np.arange(n), best]
            matched = best
            labels[best_iou < cfg.rpn_neg_iou] = 0
            labels[best_iou >= cfg.rpn_pos_iou] = 1
            # every gt keeps its best anchors
            gt_best = ious.max(axis=0)
            for j in range(len(gt_boxes)):
                if gt_best[j] > 0:
                    hit = np.nonzero(ious[:, j] == gt_best[j])[0]
                    labels[hit] = 1
                    matched[hit] = j
        else:
            labels[:] = 0
        pos = np.nonzero(labels == 1)[0]
        neg = np.nonzero(labels == 0)[0]
        n_pos = min(len(pos), int(cfg.rpn_batch * cfg.rpn_pos_fraction))
        pos = rng.permutation(pos)[:n_pos]
        neg = rng.permutation(neg)[: cfg.rpn_batch - n_pos]
        return pos, neg, matched

    def _sample_rois(self, cands, gt_boxes, gt_labels, thr, rng):
        cfg = self._cfg
        r = cfg.rois_per_image
        matched, labels = _label_rois(cands, gt_boxes, gt_labels, thr)
        fg = np.nonzero(labels > 0)[0]
        bg = np.nonzero(labels == 0)[0]
        n_fg = min(len(fg), int(round(r * cfg.roi_pos_fraction)))
        fg = rng.permutation(fg)[:n_fg]
        need = r - n_fg
        if len(bg) >= need:
            bg = rng.permutation(bg)[:need]
        elif len(bg) > 0:
            bg = np.concatenate([bg, rng.choice(bg, need - len(bg))])
        else:
            pool = np.arange(len(cands))
            bg = rng.choice(pool, need)
        keep = np.concatenate([fg, bg]).astype(np.int64)
        return cands[keep], matched[keep], labels[keep]

    def forward_train(self, maps, targets, image_size, rng: np.random.Generator) -> LossInputs:
        """Run all branches on a batch and pair outputs with sampled targets.

        ``targets`` holds one dict per image with ``boxes`` (G×4), ``labels``
        (G, 1-based) and ``masks`` (G×H×W booleans).
        """
        cfg = self._cfg
        feats = self.neck(maps)
        level_shapes = [f.shape[2:] for f in feats]
        anchors = self.anchors(level_shapes)
        logits, deltas = self.rpn(feats)
        bsz = logits.shape[0]
        n_anchor = len(anchors)

        # RPN targets
        sel_idx, sel_lab, pos_idx, pos_tgt = [], [], [], []
        for b in range(bsz):
            gt = np.asarray(targets[b]["boxes"], dtype=np.float64).reshape(-1, 4)
            pos, neg, matched = self._rpn_targets(anchors, gt, rng)
            sel_idx.append(np.concatenate([pos, neg]) + b * n_anchor)
            sel_lab.append(np.concatenate([np.ones(len(pos)), np.zeros(len(neg))]))
            if len(pos):
                pos_idx.append(pos + b * n_anchor)
                pos_tgt.append(encode_boxes(anchors.boxes[pos], gt[matched[pos]]))
        sel_idx = np.concatenate(sel_idx).astype(np.int64)
        rpn_logits = T.take_rows(T.reshape(logits, (bsz * n_anchor,)), sel_idx)
        flat_deltas = T.reshape(deltas, (bsz * n_anchor, 4))
        if pos_idx:
            rpn_deltas = T.take_rows(flat_deltas, np.concatenate(pos_idx))
            rpn_tgt = np.concatenate(pos_tgt)
        else:
            rpn_deltas, rpn_tgt = None, None

        # proposals from detached outputs
        ld, dd = logits.data, deltas.data
        rois, bidx, gts, gtl, gtm = [], [], [], [], []
        for b in range(bsz):
            props = proposals_from_rpn(anchors, ld[b], dd[b], image_size, cfg.pre_nms_topk,
                                       cfg.post_nms_topk_train, cfg.rpn_nms)
            gt = np.asarray(targets[b]["boxes"], dtype=np.float64).reshape(-1, 4)
            lab = np.asarray(targets[b]["labels"], dtype=np.int64)
            cands = np.concatenate([np.array([p.box for p in props]).reshape(-1, 4), gt])
            if len(cands) == 0:
                cands = np.array([[0.0, 0.0, image_size[1], image_size[0]]])
            boxes, _, _ = self._sample_rois(cands, gt, lab, cfg.cascade.iou_thresholds[0], rng)
            rois.append(boxes)
            bidx.append(np.full(len(boxes), b))
            gts.append(gt)
            gtl.append(lab)
            gtm.append(targets[b].get("masks"))
        bidx = np.concatenate(bidx)

        cls_l, cls_lab, box_d, box_t, box_p = [], [], [], [], []
        pooled = None
        last_boxes = last_labels = last_matched = None
        cur = rois
        for t, head in enumerate(self.box_heads):
            thr = cfg.cascade.iou_thresholds[t]
            stds = cfg.cascade.delta_stds[t]
            labels, matched_all, tgts = [], [], []
            for b in range(bsz):
                m, lab = _label_rois(cur[b], gts[b], gtl[b], thr)
                tg = np.zeros((len(cur[b]), 4))
                fg = m >= 0
                if fg.any():
                    tg[fg] = encode_boxes(cur[b][fg], gts[b][m[fg]], stds)
                labels.append(lab)
                matched_all.append(m)
                tgts.append(tg)
            all_boxes = np.concatenate(cur)
            pooled = self._pool(feats, all_boxes, bidx)
            logit, delta = head(pooled)
            lab_cat = np.concatenate(labels)
            cls_l.append(logit)
            cls_lab.append(lab_cat)
            box_d.append(delta)
            box_t.append(np.concatenate(tgts))
            box_p.append(lab_cat > 0)
            last_boxes, last_labels, last_matched = cur, labels, matched_all
            if t + 1 < len(self.box_heads):
                refined = decode_boxes(all_boxes, delta.data, stds)
                refined = clip_boxes(refined, *image_size)
                refined[:, 2] = np.maximum(refined[:, 2], refined[:, 0] + 1e-3)
                refined[:, 3] = np.maximum(refined[:, 3], refined[:, 1] + 1e-3)
                splits = np.cumsum([len(c) for c in cur])[:-1]
                cur = np.split(refined, splits)

        inp = LossInputs(cls_l, cls_lab, box_d, box_t, box_p)
        inp.rpn_logits = rpn_logits
        inp.rpn_labels = np.concatenate(sel_lab)
        inp.rpn_deltas = rpn_deltas
        inp.rpn_targets = rpn_tgt
        inp.rpn_normalizer = float(len(sel_idx))

        if self.mask_head is not None:
            lab_cat = np.concatenate(last_labels)
            pos = np.nonzero(lab_cat > 0)[0]
            if pos.size:
                mask_in = T.take_rows(pooled, pos)
                logits_m = self.mask_head(mask_in)
                k = logits_m.shape[1]
                s = logits_m.shape[2]
                flat = T.reshape(logits_m, (len(pos) * k, s, s))
                chan = np.arange(len(pos)) * k + (lab_cat[pos] - 1)
                inp.mask_logits = T.take_rows(flat, chan)
                all_boxes = np.concatenate(last_boxes)
                matched_cat = np.concatenate(last_matched)
                offsets = np.cumsum([0] + [len(g) for g in gts])
                tg = np.zeros((len(pos), s, s))
                for i, r in enumerate(pos):
                    b = bidx[r]
                    tg[i] = mask_targets(gtm[b][matched_cat[r]], all_boxes[r : r + 1], s)[0]
                inp.mask_targets = tg
            else:
                inp.mask_logits = T.take_rows(T.reshape(pooled, (pooled.shape[0], -1)), np.zeros(0, dtype=np.int64))
                inp.mask_targets = np.zeros((0,))
        return inp

    # -- inference --------------------------------------------------------

    def cascade_refine(self, feats, boxes_per_image, image_size):
        """Run every stage; returns per-stage (class probabilities, refined boxes).

        Stage ``t`` pools features at stage ``t-1``'s refined boxes.
        """
        counts = [len(b) for b in boxes_per_image]
        out = []
        if sum(counts) == 0:
            return out
        bidx = np.concatenate([np.full(c, b) for b, c in enumerate(counts)])
        cur = np.concatenate(boxes_per_image)
        for t, head in enumerate(self.box_heads):
            logit, delta = head(self._pool(feats, cur, bidx))
            z = logit.data.astype(np.float64)
            p = np.exp(z - z.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            refined = clip_boxes(decode_boxes(cur, delta.data, self._cfg.cascade.delta_stds[t]), *image_size)
            refined[:, 2] = np.maximum(refined[:, 2], refined[:, 0] + 1e-3)
            refined[:, 3] = np.maximum(refined[:, 3], refined[:, 1] + 1e-3)
            out.append((p, refined))
            cur = refined
        return out

    def forward_infer(self, maps, image_size) -> list[list[Detection]]:
        cfg = self._cfg
        with T.no_grad():
            feats = self.neck(maps)
            anchors = self.anchors([f.shape[2:] for f in feats])
            logits, deltas = self.rpn(feats)
            bsz = logits.shape[0]
            props = [
                proposals_from_rpn(anchors, logits.data[b], deltas.data[b], image_size,
                                   cfg.pre_nms_topk, cfg.post_nms_topk_test, cfg.rpn_nms)
                for b in range(bsz)
            ]
            boxes = [np.array([p.box for p in ps]).reshape(-1, 4) for ps in props]
            stages = self.cascade_refine(feats, boxes, image_size)
            results: list[list[Detection]] = [[] for _ in range(bsz)]
            if not stages:
                return results
            scores = np.mean([p for p, _ in stages], axis=0)
            final = stages[-1][1]
            counts = [len(b) for b in boxes]
            bounds = np.cumsum([0] + counts)
            kept_boxes, kept_idx = [], []
            for b in range(bsz):
                dets = []
                sl = slice(bounds[b], bounds[b + 1])
                sc, bx = scores[sl], final[sl]
                for k in range(1, sc.shape[1]):
                    ok = np.nonzero(sc[:, k] > cfg.score_threshold)[0]
                    if ok.size == 0:
                        continue
                    keep = ok[nms(bx[ok], sc[ok, k], cfg.final_nms)]
                    dets.extend(Detection(bx[i].copy(), k, float(sc[i, k])) for i in keep)
                dets.sort(key=lambda d: -d.confidence)
                dets = dets[: cfg.max_detections]
                results[b] = dets
                kept_boxes.extend(d.box for d in dets)
                kept_idx.extend([b] * len(dets))
            if self.mask_head is not None and kept_boxes:
                pooled = self._pool(feats, np.array(kept_boxes), np.array(kept_idx))
                ml = self.mask_head(pooled).data.astype(np.float64)
                probs = 1.0 / (1.0 + np.exp(-ml))
                i = 0
                for b in range(bsz):
                    for d in results[b]:
                        d.mask_probs = probs[i, d.class_id - 1]
                        i += 1
        return results
