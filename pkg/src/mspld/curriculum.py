"""Pseudo-label generation from fused detections, with the box- and image-level filters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Annotation, ImageRecord
from .detector import DetectionOutput, DetectorModel
from .features import box_features
from .geometry import BBox, iou_matrix, nms_indices

EPS = 1e-6


@dataclass
class CurriculumConfig:
    confidence_floor: float = 0.2
    class_specific_thresholds: list[float] | None = None
    nms_iou: float = 0.3
    nested_nms_iou: float = 0.7
    max_boxes_per_class: int = 4
    max_classes: int = 4
    # quantile of fused scores used to set class-specific thresholds on the first iteration
    threshold_quantile: float = 0.8

    def __post_init__(self):
        for name in ("confidence_floor", "nms_iou", "nested_nms_iou", "threshold_quantile"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.class_specific_thresholds is not None and any(
            not 0.0 <= t <= 1.0 for t in self.class_specific_thresholds
        ):
            raise ValueError("class_specific_thresholds must lie in [0, 1]")
        if self.max_boxes_per_class < 1 or self.max_classes < 1:
            raise ValueError("max counts must be >= 1")


@dataclass(frozen=True)
class PseudoLabelSet:
    image_id: int
    boxes: np.ndarray  # (k, 4)
    class_ids: np.ndarray  # (k,)
    scores: np.ndarray  # (k,)
    source: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))  # proposal indices

    def __len__(self):
        return len(self.class_ids)

    @property
    def classes(self) -> set[int]:
        return {int(c) for c in self.class_ids}

    @property
    def annotations(self) -> list[Annotation]:
        return [Annotation(BBox.from_seq(b), int(c)) for b, c in zip(self.boxes, self.class_ids)]

    def restrict(self, classes) -> "PseudoLabelSet":
        """The boxes whose class is in ``classes``."""
        keep = np.isin(self.class_ids, list(classes))
        source = self.source[keep] if len(self.source) == len(keep) else self.source
        return PseudoLabelSet(self.image_id, self.boxes[keep], self.class_ids[keep], self.scores[keep], source)


@dataclass(frozen=True)
class Discarded:
    image_id: int
    reason: str


def generate_pseudo_labels(fused: DetectionOutput, cfg: CurriculumConfig,
                           overlaps: np.ndarray | None = None) -> PseudoLabelSet | Discarded:
    """Six-stage filter over the fused detections of one image.

    1. per-class NMS at ``nms_iou``
    2. drop boxes scoring below ``confidence_floor``
    3. cross-class NMS at ``nested_nms_iou`` (nested/overlapping boxes)
    4. discard the image if one class keeps ``max_boxes_per_class`` boxes or
       ``max_classes`` classes remain
    5. class-specific thresholds
    6. discard the image if nothing survives

    ``overlaps`` may carry the precomputed pairwise IoU of ``fused.boxes``.
    """
    scores, boxes = fused.scores, fused.boxes
    n, num_classes = scores.shape
    if overlaps is None:
        overlaps = iou_matrix(boxes, boxes)
    idx, cls = [], []
    for c in range(num_classes):
        keep = nms_indices(boxes, scores[:, c], cfg.nms_iou, overlaps)
        keep = keep[scores[keep, c] >= cfg.confidence_floor]
        idx.append(keep)
        cls.append(np.full(len(keep), c))
    idx = np.concatenate(idx).astype(int)
    cls = np.concatenate(cls).astype(int)
    if len(idx) == 0:
        return Discarded(fused.image_id, "below confidence floor")
    sc = scores[idx, cls]
    keep = nms_indices(boxes[idx], sc, cfg.nested_nms_iou, overlaps[np.ix_(idx, idx)])
    idx, cls, sc = idx[keep], cls[keep], sc[keep]

    per_class = np.bincount(cls, minlength=num_classes)
    if per_class.max() >= cfg.max_boxes_per_class:
        return Discarded(fused.image_id, "too many boxes for one class")
    if np.count_nonzero(per_class) >= cfg.max_classes:
        return Discarded(fused.image_id, "too many classes")

    if cfg.class_specific_thresholds is not None:
        thr = np.asarray(cfg.class_specific_thresholds, dtype=float)
        ok = sc >= thr[cls]
        idx, cls, sc = idx[ok], cls[ok], sc[ok]
    if len(idx) == 0:
        return Discarded(fused.image_id, "no reliable pseudo objects")
    return PseudoLabelSet(fused.image_id, boxes[idx].copy(), cls, sc, idx)


def class_thresholds(fused: Sequence[DetectionOutput], num_classes: int, quantile: float) -> list[float]:
    """Per-class ``quantile`` of every fused score in the pool."""
    if not fused:
        return [0.0] * num_classes
    stacked = np.concatenate([f.scores for f in fused if len(f.scores)] or [np.zeros((0, num_classes))])
    if len(stacked) == 0:
        return [0.0] * num_classes
    return [float(np.quantile(stacked[:, c], quantile)) for c in range(num_classes)]


def class_losses(box_scores: np.ndarray, class_ids: np.ndarray, num_classes: int) -> np.ndarray:
    """``(C,)`` losses: mean ``-log`` score over pseudo boxes of each class, ``inf`` if absent."""
    out = np.full(num_classes, np.inf)
    nll = -np.log(np.clip(box_scores, EPS, 1.0))
    for c in range(num_classes):
        sel = class_ids == c
        if sel.any():
            out[c] = nll[sel].mean()
    return out


def image_class_loss(model: DetectorModel, img: ImageRecord, pseudo: PseudoLabelSet, c: int) -> float:
    """Loss of ``model`` on image ``img`` treated as class ``c``; ``inf`` when ``c`` is absent."""
    if c not in pseudo.classes:
        return float("inf")
    sel = pseudo.class_ids == c
    s = model.score_features(box_features(img, pseudo.boxes[sel]))[:, c]
    return float(class_losses(s, pseudo.class_ids[sel], model.num_classes)[c])

