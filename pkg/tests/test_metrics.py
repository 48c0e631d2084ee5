import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rtsfuse.metrics import (
    Prediction,
    ap50,
    ap50_oracle,
    evaluation_report,
    iou,
    iou_matrix,
    match_predictions,
    pr_curve,
)


def box(x1, y1, x2, y2):
    return np.array([x1, y1, x2, y2], dtype=float)


def random_scene(rng, max_items=6, grid=8):
    """Small box scene with quantised confidences so ties occur."""
    def rand_box():
        x, y = rng.integers(0, grid - 1, 2)
        w, h = rng.integers(1, 4, 2)
        return box(x, y, min(x + w, grid), min(y + h, grid))

    gts = [rand_box() for _ in range(rng.integers(0, max_items + 1))]
    preds = []
    for _ in range(rng.integers(0, max_items + 1)):
        if gts and rng.random() < 0.6:
            g = gts[rng.integers(len(gts))]
            region = np.clip(g + rng.integers(-1, 2, 4), 0, grid)
            if region[2] <= region[0] or region[3] <= region[1]:
                region = g.copy()
        else:
            region = rand_box()
        preds.append(Prediction(float(rng.integers(1, 5)) / 4, region))
    return preds, gts


def reference_match(preds, gts, thr=0.5):
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    taken = [False] * len(gts)
    matched = [-1] * len(preds)
    for i in order:
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(preds[i].region, g)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= thr:
            matched[i] = best
            taken[best] = True
    return matched


# -- IoU -----------------------------------------------------------------------


def test_mask_iou_examples():
    a = np.zeros((5, 5), bool)
    a[1:3, 1:3] = True
    assert iou(a, a) == 1.0
    b = np.zeros((5, 5), bool)
    b[3:5, 3:5] = True
    assert iou(a, b) == 0.0
    c = np.zeros((5, 5), bool)
    c[2:4, 2:4] = True
    assert iou(a, c) == 1 / 7


def test_iou_guards():
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        iou(box(0, 0, 1, 1), np.ones((2, 2), bool))


def test_box_and_mask_iou_agree(rng):
    def rand_box():
        xs, ys = np.sort(rng.integers(0, 9, 2)), np.sort(rng.integers(0, 9, 2))
        return box(xs[0], ys[0], xs[1] + 1, ys[1] + 1)

    for _ in range(20):
        a, b = rand_box(), rand_box()
        ma = np.zeros((10, 10), bool)
        ma[int(a[1]):int(a[3]), int(a[0]):int(a[2])] = True
        mb = np.zeros((10, 10), bool)
        mb[int(b[1]):int(b[3]), int(b[0]):int(b[2])] = True
        assert iou(a, b) == pytest.approx(iou(ma, mb))
        np.testing.assert_allclose(iou_matrix([a], [b]), [[iou(a, b)]])


# -- matching ------------------------------------------------------------------


def test_matching_examples():
    g = box(0, 0, 4, 4)
    m = match_predictions([Prediction(0.9, g.copy())], [g])
    assert m.tp.tolist() == [True]
    m = match_predictions([Prediction(0.4, g.copy()), Prediction(0.8, g.copy())], [g])
    assert m.matched_gt.tolist() == [-1, 0]


@given(st.integers(0, 2**32 - 1))
def test_matching_equals_reference(seed):
    preds, gts = random_scene(np.random.default_rng(seed))
    assert match_predictions(preds, gts).matched_gt.tolist() == reference_match(preds, gts)


def test_non_finite_confidence_rejected():
    with pytest.raises(ValueError):
        match_predictions([Prediction(float("nan"), box(0, 0, 1, 1))], [box(0, 0, 1, 1)])


# -- AP ------------------------------------------------------------------------


def hand_case():
    g1, g2 = box(0, 0, 4, 4), box(10, 10, 14, 14)
    preds = [Prediction(0.9, g1.copy()), Prediction(0.8, box(20, 20, 22, 22)), Prediction(0.7, g2.copy())]
    return preds, [g1, g2]


# recall steps of 1/2 at precision 1 and 2/3, summed left to right
HAND_AP = 1.0 * 0.5 + (2 / 3) * 0.5


def test_hand_value_is_five_sixths():
    assert abs(HAND_AP - 5 / 6) <= np.spacing(5 / 6)


def test_ap_examples():
    g = [box(0, 0, 2, 2), box(5, 5, 8, 8)]
    perfect = [Prediction(0.5, x.copy()) for x in g]
    assert ap50(perfect, g) == 1.0 and ap50_oracle(perfect, g) == 1.0
    assert ap50([], g) == 0.0 and ap50_oracle([], g) == 0.0
    preds, gts = hand_case()
    assert ap50(preds, gts) == HAND_AP
    assert ap50_oracle(preds, gts) == HAND_AP


def test_empty_conventions():
    assert ap50([], []) == 1.0
    assert ap50([Prediction(0.3, box(0, 0, 1, 1))], []) == 0.0


def test_multi_image_pooling():
    preds, gts = hand_case()
    split_p = [[preds[0]], [preds[1], preds[2]]]
    split_g = [[gts[0]], [gts[1]]]
    assert ap50(split_p, split_g) == HAND_AP == ap50_oracle(split_p, split_g)


@given(st.integers(0, 2**32 - 1))
def test_fast_equals_oracle(seed):
    preds, gts = random_scene(np.random.default_rng(seed))
    assert abs(ap50(preds, gts) - ap50_oracle(preds, gts)) < 1e-12


@given(st.integers(0, 2**32 - 1))
def test_trailing_false_positive_never_helps(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_scene(rng)
    low = min([p.confidence for p in preds], default=1.0) / 2
    extra = preds + [Prediction(low, box(30, 30, 31, 31))]
    assert ap50_oracle(extra, gts) <= ap50_oracle(preds, gts)


@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_scene(rng)
    # distinct confidences so the order of equals cannot matter
    preds = [Prediction(p.confidence + 1e-3 * i, p.region) for i, p in enumerate(preds)]
    perm = rng.permutation(len(preds))
    assert ap50(preds, gts) == ap50([preds[i] for i in perm], gts)


def test_pr_curve_groups_ties():
    g = [box(0, 0, 2, 2)]
    preds = [Prediction(0.5, g[0].copy()), Prediction(0.5, box(5, 5, 6, 6))]
    points, _, n = pr_curve(preds, g)
    assert n == 1 and len(points) == 1
    assert points[0].recall == 1.0 and points[0].precision == 0.5


def test_report_matches_library():
    preds, gts = hand_case()
    rep = evaluation_report(preds, gts, {"k": 1})
    assert rep["ap50"] == ap50(preds, gts)
    assert rep["num_gt"] == 2 and rep["config"] == {"k": 1}
    assert [p["interpolated"] for p in rep["pr_points"]] == [1.0, 2 / 3, 2 / 3]
