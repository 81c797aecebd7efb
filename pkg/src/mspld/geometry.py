"""Bounding-box arithmetic shared by every other module.

Boxes are ``(up, left, bottom, right)`` with real-valued pixel coordinates.
Area uses the open-interval convention ``(bottom - up) * (right - left)``,
with no ``+1`` pixel correction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    up: float
    left: float
    bottom: float
    right: float

    def __post_init__(self):
        if self.up > self.bottom or self.left > self.right:
            raise ValueError(f"inverted box: {self}")

    @property
    def area(self) -> float:
        return (self.bottom - self.up) * (self.right - self.left)

    def as_list(self) -> list[float]:
        return [self.up, self.left, self.bottom, self.right]

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "BBox":
        up, left, bottom, right = (float(v) for v in seq)
        return cls(up, left, bottom, right)


@dataclass(frozen=True)
class ScoredBox:
    box: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of [0,1]: {self.score}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint or degenerate boxes."""
    ih = min(a.bottom, b.bottom) - max(a.up, b.up)
    iw = min(a.right, b.right) - max(a.left, b.left)
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_list() for b in boxes], dtype=float)


def area_array(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(k, 4)`` box arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ih = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iw = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ih, 0, None) * np.clip(iw, 0, None)
    union = area_array(a)[:, None] + area_array(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                overlaps: np.ndarray | None = None) -> np.ndarray:
    """Greedy NMS over arrays; returns kept indices in descending score order.

    Ties in score are broken by the lower index. A box is suppressed when its
    IoU with an already kept box is ``>= iou_threshold``. ``overlaps`` may hold
    a precomputed ``iou_matrix(boxes, boxes)``.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        return np.zeros(0, dtype=int)
    if overlaps is None:
        overlaps = iou_matrix(boxes, boxes)
    order = np.lexsort((np.arange(scores.size), -scores))
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        order = rest[overlaps[i, rest] < iou_threshold]
    return np.asarray(keep, dtype=int)


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression for boxes of a single class."""
    if not boxes:
        return []
    arr = boxes_to_array([b.box for b in boxes])
    scores = np.array([b.score for b in boxes])
    return [boxes[i] for i in nms_indices(arr, scores, iou_threshold)]


def clip_boxes(boxes: np.ndarray, height: float, width: float, min_size: float = 1.0) -> np.ndarray:
    """Clip to the image and enforce a minimum side length."""
    out = np.array(boxes, dtype=float, copy=True)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, height)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, width)
    for lo, hi, limit in ((0, 2, height), (1, 3, width)):
        short = out[:, hi] - out[:, lo] < min_size
        out[short, hi] = np.minimum(out[short, lo] + min_size, limit)
        out[short, lo] = out[short, hi] - min_size
    return out
