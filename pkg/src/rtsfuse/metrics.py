"""AP50 evaluation for instance masks or boxes, plus a brute-force oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

IOU_THRESHOLD = 0.5


@dataclass
class Prediction:
    confidence: float
    region: np.ndarray  # H×W boolean mask or (x1, y1, x2, y2) box


@dataclass
class MatchResult:
    confidences: np.ndarray  # per prediction, input order
    matched_gt: np.ndarray  # gt index or -1
    ious: np.ndarray  # IoU with the matched gt (0 when unmatched)
    gt_matched: np.ndarray  # bool per gt

    @property
    def tp(self) -> np.ndarray:
        return self.matched_gt >= 0

    def to_dict(self) -> dict:
        return {
            "confidence": self.confidences.tolist(),
            "matched_gt": self.matched_gt.tolist(),
            "iou": self.ious.tolist(),
            "gt_matched": self.gt_matched.tolist(),
        }


@dataclass
class PRPoint:
    recall: float
    precision: float
    threshold: float


def _is_box(x: np.ndarray) -> bool:
    return x.ndim == 1 and x.shape[0] == 4


def iou(a, b) -> float:
    """Intersection over union of two masks or two boxes."""
    a, b = np.asarray(a), np.asarray(b)
    if _is_box(a) != _is_box(b):
        raise ValueError("cannot compare a mask with a box")
    if _is_box(a):
        a, b = a.astype(np.float64), b.astype(np.float64)
        iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        inter = iw * ih
        union = max(a[2] - a[0], 0) * max(a[3] - a[1], 0) + max(b[2] - b[0], 0) * max(b[3] - b[1], 0) - inter
    else:
        if a.shape != b.shape:
            raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
        a, b = a.astype(bool), b.astype(bool)
        inter = float(np.logical_and(a, b).sum())
        union = float(np.logical_or(a, b).sum())
    if union <= 0:
        raise ValueError("IoU undefined: both regions are empty")
    return float(inter / union)


def iou_matrix(preds, gts) -> np.ndarray:
    """``len(preds) × len(gts)`` IoUs; pairs with an empty union get 0."""
    if len(preds) == 0 or len(gts) == 0:
        return np.zeros((len(preds), len(gts)))
    p0 = np.asarray(preds[0])
    if _is_box(p0):
        a = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
        b = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        lt = np.maximum(a[:, None, :2], b[None, :, :2])
        rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[..., 0] * wh[..., 1]
        area = lambda x: np.clip(x[:, 2] - x[:, 0], 0, None) * np.clip(x[:, 3] - x[:, 1], 0, None)
        union = area(a)[:, None] + area(b)[None, :] - inter
    else:
        a = np.asarray(preds, dtype=bool).reshape(len(preds), -1).astype(np.float64)
        b = np.asarray(gts, dtype=bool).reshape(len(gts), -1).astype(np.float64)
        inter = a @ b.T
        union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def match_predictions(preds, gts, iou_threshold: float = IOU_THRESHOLD) -> MatchResult:
    """Greedy one-to-one matching in descending confidence.

    Ties in confidence go to the lower prediction index; each prediction takes
    the unmatched ground truth of highest IoU (at least ``iou_threshold``),
    ties to the lower ground-truth index.
    """
    conf = np.array([p.confidence for p in preds], dtype=np.float64)
    if not np.all(np.isfinite(conf)):
        raise ValueError("non-finite confidence")
    ious = iou_matrix([p.region for p in preds], list(gts))
    matched = np.full(len(preds), -1, dtype=np.int64)
    best = np.zeros(len(preds))
    taken = np.zeros(len(gts), dtype=bool)
    for i in np.lexsort((np.arange(len(preds)), -conf)):
        if not len(gts):
            break
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))  # first maximum = lowest index
        if cand[j] >= iou_threshold:
            matched[i] = j
            best[i] = cand[j]
            taken[j] = True
    return MatchResult(conf, matched, best, taken)


def _as_images(preds, gts):
    """Normalise single-image input to a list of per-image lists."""
    if len(preds) and isinstance(preds[0], Prediction):
        return [list(preds)], [list(gts)]
    if not len(preds) and (not len(gts) or not isinstance(gts[0], (list, tuple))):
        return [list(preds)], [list(gts)]
    return [list(p) for p in preds], [list(g) for g in gts]


def pr_curve(preds, gts, iou_threshold: float = IOU_THRESHOLD):
    """Precision/recall after each group of equal confidences, plus the match results."""
    images_p, images_g = _as_images(preds, gts)
    results = [match_predictions(p, g, iou_threshold) for p, g in zip(images_p, images_g)]
    n_gt = sum(len(g) for g in images_g)
    if not results:
        return [], results, n_gt
    conf = np.concatenate([r.confidences for r in results])
    tp = np.concatenate([r.tp for r in results])
    if conf.size == 0:
        return [], results, n_gt
    order = np.argsort(-conf, kind="stable")
    conf, tp = conf[order], tp[order]
    ctp = np.cumsum(tp)
    ends = np.nonzero(np.r_[conf[1:] != conf[:-1], True])[0]
    points = [
        PRPoint(
            recall=float(ctp[e] / n_gt) if n_gt else 0.0,
            precision=float(ctp[e] / (e + 1)),
            threshold=float(conf[e]),
        )
        for e in ends
    ]
    return points, results, n_gt


def interpolate(points) -> np.ndarray:
    """Precision made nonincreasing in recall (running max from the right)."""
    p = np.array([pt.precision for pt in points])
    return np.maximum.accumulate(p[::-1])[::-1] if p.size else p


def ap50(preds, gts, iou_threshold: float = IOU_THRESHOLD) -> float:
    """Area under the all-point interpolated precision-recall curve.

    Accepts one image (a list of :class:`Prediction` and a list of regions)
    or per-image lists.  No predictions and no ground truth gives 1.0; with
    ground truth but no predictions, or predictions but no ground truth, 0.0.
    """
    points, _, n_gt = pr_curve(preds, gts, iou_threshold)
    if n_gt == 0:
        return 1.0 if not points else 0.0
    if not points:
        return 0.0
    r = np.array([pt.recall for pt in points])
    prec = interpolate(points)
    dr = np.diff(np.r_[0.0, r])
    return float(np.sum(dr * prec))


def ap50_oracle(preds, gts, iou_threshold: float = IOU_THRESHOLD) -> float:
    """Definitional AP: rematch from scratch at every distinct threshold.

    Quadratic in the number of predictions; meant for small verification cases.
    """
    images_p, images_g = _as_images(preds, gts)
    n_gt = sum(len(g) for g in images_g)
    all_conf = sorted({float(p.confidence) for ps in images_p for p in ps}, reverse=True)
    if n_gt == 0:
        return 1.0 if not all_conf else 0.0
    if not all_conf:
        return 0.0
    curve = []
    for t in all_conf:
        tp = fp = 0
        for ps, gs in zip(images_p, images_g):
            kept = [p for p in ps if p.confidence >= t]
            m = match_predictions(kept, gs, iou_threshold)
            tp += int(m.tp.sum())
            fp += int((~m.tp).sum())
        curve.append((tp / n_gt, tp / (tp + fp)))
    # p~(r) = max precision over points with recall >= r, integrated on [0, r_max]
    recalls = sorted({r for r, _ in curve})
    area, prev = 0.0, 0.0
    for r in recalls:
        best = 0.0
        for rr, pp in curve:
            if rr >= r and pp > best:
                best = pp
        area += (r - prev) * best
        prev = r
    return area


def predictions_from_detections(detections, height: int, width: int, kind: str = "mask") -> list[Prediction]:
    """Convert head detections to regions of the requested kind."""
    if kind == "mask":
        return [Prediction(d.confidence, d.mask(height, width)) for d in detections]
    if kind == "box":
        return [Prediction(d.confidence, np.asarray(d.box, dtype=np.float64)) for d in detections]
    raise ValueError(f"unknown evaluation kind {kind!r}")


def evaluation_report(preds, gts, config: dict | None = None, iou_threshold: float = IOU_THRESHOLD) -> dict:
    """JSON-ready ``{ap50, pr_points, per_image, config}``."""
    points, results, n_gt = pr_curve(preds, gts, iou_threshold)
    prec = interpolate(points)
    return {
        "ap50": ap50(preds, gts, iou_threshold),
        "num_gt": n_gt,
        "pr_points": [
            {"recall": p.recall, "precision": p.precision, "interpolated": float(q), "threshold": p.threshold}
            for p, q in zip(points, prec)
        ],
        "per_image": [r.to_dict() for r in results],
        "config": dict(config or {}),
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)
