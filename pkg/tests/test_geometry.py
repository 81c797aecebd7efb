import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspld.geometry import BBox, ScoredBox, clip_boxes, iou, iou_matrix, nms, nms_indices


def boxes(max_side=50.0):
    coord = st.floats(0, 100, allow_nan=False)
    side = st.floats(0.5, max_side, allow_nan=False)
    return st.builds(lambda u, l, h, w: BBox(u, l, u + h, l + w), coord, coord, side, side)


def test_area_has_no_pixel_correction():
    assert BBox(0, 0, 10, 10).area == 100.0


def test_iou_hand_values():
    a = BBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(0, 5, 10, 15)) == pytest.approx(50 / 150)
    assert iou(a, BBox(20, 20, 30, 30)) == 0.0
    # touching edges share no area
    assert iou(a, BBox(10, 0, 20, 10)) == 0.0


def test_inverted_box_rejected():
    with pytest.raises(ValueError):
        BBox(5, 0, 1, 3)


def test_score_range_checked():
    with pytest.raises(ValueError):
        ScoredBox(BBox(0, 0, 1, 1), 0, 1.5)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a))


@given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
def test_iou_matrix_matches_scalar(xs, ys):
    a = np.array([b.as_list() for b in xs])
    b = np.array([b.as_list() for b in ys])
    m = iou_matrix(a, b)
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            assert m[i, j] == pytest.approx(iou(x, y), abs=1e-12)


def test_nms_keeps_highest_and_suppresses_at_threshold():
    a = BBox(0, 0, 10, 10)
    b = BBox(0, 5, 10, 15)  # iou 1/3 with a
    c = BBox(50, 50, 60, 60)
    kept = nms([ScoredBox(a, 0, 0.9), ScoredBox(b, 0, 0.8), ScoredBox(c, 0, 0.1)], 1 / 3)
    assert [k.box for k in kept] == [a, c]
    kept = nms([ScoredBox(a, 0, 0.9), ScoredBox(b, 0, 0.8)], 0.34)
    assert len(kept) == 2


def test_nms_tie_prefers_lower_index():
    arr = np.array([[0, 0, 10, 10], [0, 0, 10, 10.5]])
    assert nms_indices(arr, np.array([0.5, 0.5]), 0.5).tolist() == [0]


@settings(max_examples=60)
@given(st.lists(st.tuples(boxes(), st.floats(0, 1)), min_size=0, max_size=12), st.floats(0.05, 0.95))
def test_nms_properties(items, thr):
    arr = np.array([b.as_list() for b, _ in items]).reshape(-1, 4)
    scores = np.array([s for _, s in items])
    keep = nms_indices(arr, scores, thr)
    # kept boxes overlap each other below the threshold
    ov = iou_matrix(arr[keep], arr[keep])
    np.fill_diagonal(ov, 0)
    assert (ov < thr).all()
    # every dropped box is covered by a kept box scoring at least as high
    for n in set(range(len(items))) - set(keep.tolist()):
        cover = [k for k in keep if iou_matrix(arr[[k]], arr[[n]])[0, 0] >= thr]
        assert cover and max(scores[cover]) >= scores[n]
    # descending score order
    assert np.all(np.diff(scores[keep]) <= 0)


def test_precomputed_overlaps_give_same_result():
    rng = np.random.default_rng(0)
    up = rng.uniform(0, 50, 30)
    left = rng.uniform(0, 50, 30)
    arr = np.stack([up, left, up + rng.uniform(1, 20, 30), left + rng.uniform(1, 20, 30)], 1)
    s = rng.random(30)
    assert nms_indices(arr, s, 0.3).tolist() == nms_indices(arr, s, 0.3, iou_matrix(arr, arr)).tolist()


def test_clip_boxes_inside_image_with_min_size():
    out = clip_boxes(np.array([[-5, -5, 3, 200], [10, 10, 10.5, 11]]), 64, 64, min_size=4)
    assert (out[:, [0, 1]] >= 0).all() and (out[:, [2, 3]] <= 64).all()
    assert (out[:, 2] - out[:, 0] >= 4 - 1e-12).all()
    assert (out[:, 3] - out[:, 1] >= 4 - 1e-12).all()
