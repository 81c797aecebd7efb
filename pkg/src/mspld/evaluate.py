"""VOC-style detection metrics: average precision, CorLoc, pseudo-label quality."""
from __future__ import annotations

import csv
import io
import math
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Annotation
from .geometry import BBox, ScoredBox, boxes_to_array, iou_matrix

log = logging.getLogger(__name__)

AP_MODES = ("eleven_point", "all_points")


@dataclass
class APResult:
    per_class: dict[int, float]  # classes without ground truth are absent
    mean: float


def _ap_from_pr(rec: np.ndarray, prec: np.ndarray, mode: str) -> float:
    if mode == "eleven_point":
        # thresholds as i/10 rather than an arange of 0.1 steps, which lands on 0.30000000000000004
        tops = [prec[rec >= i / 10].max() if np.any(rec >= i / 10) else 0.0 for i in range(11)]
        return min(1.0, math.fsum(tops) / 11)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return min(1.0, math.fsum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def match_detections(dets: Sequence[tuple[int, float, np.ndarray]], gts: Mapping[int, np.ndarray],
                     iou_thresh: float) -> np.ndarray:
    """Greedy matching in descending score order; returns a TP flag per sorted detection.

    ``dets`` holds ``(image_id, score, box)``; ``gts`` maps image id to ``(k, 4)`` boxes.
    """
    order = sorted(range(len(dets)), key=lambda n: (-dets[n][1], n))
    used = {i: np.zeros(len(b), dtype=bool) for i, b in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, n in enumerate(order):
        image_id, _, box = dets[n]
        g = gts.get(image_id)
        if g is None or len(g) == 0:
            continue
        ov = iou_matrix(np.asarray(box)[None], g)[0]
        best = int(np.argmax(ov))
        if ov[best] >= iou_thresh and not used[image_id][best]:
            used[image_id][best] = True
            tp[rank] = True
    return tp


def average_precision(dets: Mapping[int, Sequence[ScoredBox]], gts: Mapping[int, Sequence[Annotation]],
                      num_classes: int, iou_thresh: float = 0.5, mode: str = "eleven_point") -> APResult:
    """Per-class AP and their mean over the images in ``gts``.

    Detections on images absent from ``gts`` are ignored. A detection is a true
    positive when its best-overlapping ground truth of the same class has IoU
    ``>= iou_thresh`` and has not already been claimed by a higher-scored one.
    """
    if mode not in AP_MODES:
        raise ValueError(f"mode must be one of {AP_MODES}")
    per_class: dict[int, float] = {}
    for c in range(num_classes):
        gt_c = {i: boxes_to_array([a.box for a in anns if a.class_id == c]) for i, anns in gts.items()}
        npos = sum(len(b) for b in gt_c.values())
        if npos == 0:
            log.warning("class %d has no ground truth; excluded from mAP", c)
            continue
        det_c = [(i, d.score, np.asarray(d.box.as_list())) for i, ds in dets.items() if i in gts
                 for d in ds if d.class_id == c]
        if not det_c:
            per_class[c] = 0.0
            continue
        tp = match_detections(det_c, gt_c, iou_thresh)
        ctp = np.cumsum(tp)
        cfp = np.cumsum(~tp)
        rec = ctp / npos
        prec = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
        per_class[c] = _ap_from_pr(rec, prec, mode)
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return APResult(per_class, mean)


@dataclass
class CorLocResult:
    per_class: dict[int, float]
    mean: float


def corloc(top_detections: Mapping[int, Mapping[int, BBox]], gts: Mapping[int, Sequence[Annotation]],
           num_classes: int, iou_thresh: float = 0.5) -> CorLocResult:
    """Fraction of images containing class ``c`` whose top class-``c`` detection hits a ``c`` box.

    ``top_detections[image_id][c]`` is the highest-scored class-``c`` box of the image.
    """
    per_class: dict[int, float] = {}
    for c in range(num_classes):
        hits = total = 0
        for image_id, anns in gts.items():
            g = [a.box for a in anns if a.class_id == c]
            if not g:
                continue
            total += 1
            top = top_detections.get(image_id, {}).get(c)
            if top is not None and iou_matrix(np.asarray([top.as_list()]), boxes_to_array(g)).max() >= iou_thresh:
                hits += 1
        if total:
            per_class[c] = hits / total
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return CorLocResult(per_class, mean)


@dataclass
class PseudoQuality:
    img_precision: float
    img_recall: float
    ins_precision: float
    ins_recall: float
    n_images: int
    n_boxes: int

    @property
    def empty(self) -> bool:
        # precision is reported as 1.0 with zero support when nothing was generated
        return self.n_images == 0


def _ins_matches(pred: Sequence[Annotation], gt: Sequence[Annotation], iou_thresh: float):
    """One-to-one matching of pseudo boxes to same-class gt boxes, in input order."""
    used = [False] * len(gt)
    good = [False] * len(pred)
    for n, p in enumerate(pred):
        cand = [k for k, g in enumerate(gt) if g.class_id == p.class_id and not used[k]]
        if not cand:
            continue
        ov = iou_matrix(np.asarray([p.box.as_list()]), boxes_to_array([gt[k].box for k in cand]))[0]
        best = int(np.argmax(ov))
        if ov[best] >= iou_thresh:
            used[cand[best]] = True
            good[n] = True
    return good, used


def pseudo_quality(pseudo: Mapping[int, Sequence[Annotation]], gts: Mapping[int, Sequence[Annotation]],
                   iou_thresh: float = 0.5, classes: Sequence[int] | None = None) -> PseudoQuality:
    """Image- and instance-level precision/recall of generated labels over an unlabeled pool.

    ``gts`` must cover the whole pool (distractors included, with no boxes).
    An image is correct when every pseudo class it carries is in its ground
    truth. A pseudo box is correct when it matches a same-class gt box at IoU
    ``>= iou_thresh``. Passing ``classes`` restricts both sides to those classes.
    """
    keep = (lambda a: True) if classes is None else (lambda a: a.class_id in classes)
    gts = {i: [a for a in anns if keep(a)] for i, anns in gts.items()}
    pseudo = {i: [a for a in anns if keep(a)] for i, anns in pseudo.items()}
    pseudo = {i: anns for i, anns in pseudo.items() if anns}

    n_img = len(pseudo)
    img_ok = 0
    n_box = box_ok = 0
    gt_hit = 0
    for i, anns in pseudo.items():
        gt = gts.get(i, [])
        if {a.class_id for a in anns} <= {g.class_id for g in gt}:
            img_ok += 1
        good, used = _ins_matches(anns, gt, iou_thresh)
        n_box += len(anns)
        box_ok += sum(good)
        gt_hit += sum(used)
    img_total = sum(1 for anns in gts.values() if anns)
    box_total = sum(len(anns) for anns in gts.values())
    return PseudoQuality(
        img_precision=img_ok / n_img if n_img else 1.0,
        img_recall=img_ok / img_total if img_total else 0.0,
        ins_precision=box_ok / n_box if n_box else 1.0,
        ins_recall=gt_hit / box_total if box_total else 0.0,
        n_images=n_img,
        n_boxes=n_box,
    )


CSV_COLUMNS = ("class_id", "ap", "corloc", "img_p", "img_r", "ins_p", "ins_r")


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return f"{x:.6f}"


def metrics_csv(num_classes: int, ap: APResult, cl: CorLocResult | None,
                quality: Mapping[int, PseudoQuality] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in range(num_classes):
        q = quality.get(c) if quality else None
        w.writerow([
            c,
            _fmt(ap.per_class.get(c)),
            _fmt(cl.per_class.get(c) if cl else None),
            _fmt(q.img_precision if q else None),
            _fmt(q.img_recall if q else None),
            _fmt(q.ins_precision if q else None),
            _fmt(q.ins_recall if q else None),
        ])
    return buf.getvalue()
