import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspld.data import Annotation
from mspld.evaluate import average_precision, corloc, metrics_csv, pseudo_quality
from mspld.geometry import BBox, ScoredBox

A = BBox(0, 0, 10, 10)
B = BBox(20, 20, 30, 30)
FAR = BBox(50, 50, 60, 60)


def det(box, score, c=0):
    return ScoredBox(box, c, score)


def reference_ap(scored_tp, npos, mode):
    """Straight transcription of the VOC07 11-point and area rules on (score, is_tp) pairs."""
    pairs = sorted(scored_tp, key=lambda p: -p[0])
    tp = fp = 0
    rec, prec = [], []
    for _, hit in pairs:
        tp += hit
        fp += not hit
        rec.append(tp / npos)
        prec.append(tp / (tp + fp))
    if mode == "eleven_point":
        return sum(max([p for r, p in zip(rec, prec) if r >= t / 10] or [0.0]) for t in range(11)) / 11
    area, last = 0.0, 0.0
    for n, r in enumerate(rec):
        if r > last:
            area += (r - last) * max(prec[n:])
            last = r
    return area


def test_perfect_detector():
    gts = {0: [Annotation(A, 0), Annotation(B, 1)], 1: [Annotation(B, 0)]}
    dets = {0: [det(A, 0.3, 0), det(B, 0.1, 1)], 1: [det(B, 0.9, 0)]}
    res = average_precision(dets, gts, 2)
    assert res.per_class == {0: 1.0, 1: 1.0} and res.mean == 1.0


def test_no_detections():
    assert average_precision({}, {0: [Annotation(A, 0)]}, 1).mean == 0.0


def test_one_gt_three_detections():
    dets = {0: [det(A, 0.9), det(FAR, 0.8), det(B, 0.7)]}
    assert average_precision(dets, {0: [Annotation(A, 0)]}, 1).mean == pytest.approx(1.0, abs=1e-9)


def test_hand_computed_two_gt_fixture():
    # ranks: TP, FP, TP over 2 gts -> P = 1, 1/2, 2/3 at R = 1/2, 1/2, 1
    gts = {0: [Annotation(A, 0), Annotation(B, 0)]}
    dets = {0: [det(A, 0.9), det(FAR, 0.8), det(B, 0.7)]}
    assert average_precision(dets, gts, 1).mean == pytest.approx(28 / 33, abs=1e-9)
    assert average_precision(dets, gts, 1, mode="all_points").mean == pytest.approx(5 / 6, abs=1e-9)


def test_duplicates_count_once():
    dets = {0: [det(A, 0.9), det(A, 0.8), det(A, 0.7)]}
    # TP, FP, FP: precision 1 at recall 1, so AP stays 1 but only one match
    assert average_precision(dets, {0: [Annotation(A, 0)]}, 1).mean == pytest.approx(1.0)
    dets = {0: [det(A, 0.9), det(A, 0.8)], 1: [det(B, 0.7)]}
    gts = {0: [Annotation(A, 0)], 1: [Annotation(B, 0)]}
    # TP, FP, TP over 2 gts again
    assert average_precision(dets, gts, 1).mean == pytest.approx(28 / 33, abs=1e-9)


def test_class_without_gt_is_excluded(caplog):
    res = average_precision({0: [det(A, 0.5, 1)]}, {0: [Annotation(A, 0)]}, 2)
    assert res.per_class == {0: 0.0} and res.mean == 0.0
    assert "no ground truth" in caplog.text


def test_bad_mode():
    with pytest.raises(ValueError):
        average_precision({}, {}, 1, mode="coco")


def _random_fixture(rng, n_img=4, num_classes=2):
    gts, dets = {}, {}
    for i in range(n_img):
        anns = []
        for _ in range(rng.integers(0, 3)):
            u, l = rng.uniform(0, 80, 2)
            anns.append(Annotation(BBox(u, l, u + rng.uniform(5, 20), l + rng.uniform(5, 20)), int(rng.integers(num_classes))))
        gts[i] = anns
        ds = []
        for a in anns:
            if rng.random() < 0.8:
                shift = rng.uniform(-3, 3)
                b = a.box
                ds.append(det(BBox(b.up + shift, b.left, b.bottom + shift, b.right), float(rng.random()), a.class_id))
        for _ in range(rng.integers(0, 4)):
            u, l = rng.uniform(0, 80, 2)
            ds.append(det(BBox(u, l, u + 10, l + 10), float(rng.random()), int(rng.integers(num_classes))))
        dets[i] = ds
    return dets, gts


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_rank_invariance(seed):
    dets, gts = _random_fixture(np.random.default_rng(seed))
    squashed = {i: [ScoredBox(d.box, d.class_id, d.score ** 3) for d in ds] for i, ds in dets.items()}
    for mode in ("eleven_point", "all_points"):
        a = average_precision(dets, gts, 2, mode=mode)
        b = average_precision(squashed, gts, 2, mode=mode)
        assert a.per_class == b.per_class


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_matches_reference_and_bounds(seed):
    rng = np.random.default_rng(seed)
    npos = int(rng.integers(1, 6))
    n = int(rng.integers(0, 8))
    hits = rng.permutation([True] * min(n, npos) + [False] * (n - min(n, npos)))
    scores = rng.permutation(np.linspace(0.05, 0.95, n)) if n else []
    gts = {i: [Annotation(BBox(0, 0, 10, 10), 0)] for i in range(npos)}
    dets, taken = {}, 0
    pairs = []
    for s, h in zip(scores, hits):
        if h:
            dets.setdefault(taken, []).append(det(A, float(s)))
            taken += 1
        else:
            dets.setdefault(npos + 100, []).append(det(A, float(s)))
            gts.setdefault(npos + 100, [])
        pairs.append((float(s), bool(h)))
    eleven = average_precision(dets, gts, 1).mean
    area = average_precision(dets, gts, 1, mode="all_points").mean
    assert eleven == pytest.approx(reference_ap(pairs, npos, "eleven_point"), abs=1e-12)
    assert area == pytest.approx(reference_ap(pairs, npos, "all_points"), abs=1e-12)
    assert 0 <= eleven <= area + 1 / 11 and 0 <= area <= 1


# -- CorLoc ---------------------------------------------------------------------------------

def test_corloc_examples():
    gts = {i: [Annotation(A, 0)] for i in range(4)}
    assert corloc({i: {0: A} for i in range(4)}, gts, 1).mean == 1.0
    assert corloc({i: {0: FAR} for i in range(4)}, gts, 1).mean == 0.0
    half = {0: {0: A}, 1: {0: A}, 2: {0: FAR}}  # image 3 has no detection at all
    assert corloc(half, gts, 1).per_class[0] == pytest.approx(0.5, abs=1e-9)


def test_corloc_only_counts_images_with_the_class():
    gts = {0: [Annotation(A, 0)], 1: [Annotation(B, 1)]}
    res = corloc({0: {0: A, 1: A}, 1: {1: B}}, gts, 2)
    assert res.per_class == {0: 1.0, 1: 1.0}


# -- pseudo-label quality ------------------------------------------------------------------------

def test_quality_exact_gt():
    gts = {0: [Annotation(A, 0)], 1: [Annotation(B, 1), Annotation(A, 0)]}
    q = pseudo_quality(gts, gts)
    assert (q.img_precision, q.img_recall, q.ins_precision, q.ins_recall) == (1.0, 1.0, 1.0, 1.0)


def test_quality_empty():
    q = pseudo_quality({}, {0: [Annotation(A, 0)]})
    assert q.empty and q.img_precision == 1.0 and q.ins_precision == 1.0
    assert q.img_recall == 0.0 and q.ins_recall == 0.0


def test_quality_three_of_four():
    gts = {0: [Annotation(A, 0), Annotation(B, 1)], 1: [Annotation(A, 0)], 2: []}
    pseudo = {0: [Annotation(A, 0), Annotation(B, 1)], 1: [Annotation(A, 0)], 2: [Annotation(A, 1)]}
    q = pseudo_quality(pseudo, gts)
    assert q.ins_precision == pytest.approx(0.75)
    assert q.ins_recall == 1.0
    assert q.img_precision == pytest.approx(2 / 3)  # the distractor image carries a class it lacks
    assert q.img_recall == 1.0


def test_quality_wrong_class_box_is_wrong():
    gts = {0: [Annotation(A, 0)]}
    q = pseudo_quality({0: [Annotation(A, 1)]}, gts)
    assert q.ins_precision == 0.0 and q.img_precision == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_rates_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    dets, gts = _random_fixture(rng)
    pseudo = {i: [Annotation(d.box, d.class_id) for d in ds] for i, ds in dets.items() if rng.random() < 0.6}
    q = pseudo_quality(pseudo, gts)
    for x in (q.img_precision, q.img_recall, q.ins_precision, q.ins_recall):
        assert 0.0 <= x <= 1.0
    ap = average_precision(dets, gts, 2)
    assert all(0.0 <= v <= 1.0 for v in ap.per_class.values())
    assert math.isnan(ap.mean) or 0.0 <= ap.mean <= 1.0


def test_metrics_csv_columns():
    ap = average_precision({0: [det(A, 0.5)]}, {0: [Annotation(A, 0)]}, 2)
    text = metrics_csv(2, ap, None)
    lines = text.splitlines()
    assert lines[0] == "class_id,ap,corloc,img_p,img_r,ins_p,ins_r"
    assert lines[1] == "0,1.000000,,,,,"
    assert lines[2] == "1,,,,,,"
