"""Pluggable toy detectors and multi-model score fusion.

Three families stand in for CNN detectors. Each sees only the feature channels
in its ``view`` and outputs per-class scores in [0, 1] for every proposal:

* ``prototype``: nearest class mean under a shared diagonal metric, softmax of
  negative squared distances over the C classes plus background;
* ``linear``: multinomial logistic regression trained by a fixed number of
  full-batch gradient passes;
* ``histogram``: naive Bayes over per-channel quantile bins.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Collection, Sequence

import numpy as np

from .data import Annotation, ImageRecord
from .features import ProposalBank, box_features, view_columns
from .geometry import boxes_to_array, iou_matrix

FAMILIES = ("prototype", "linear", "histogram")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectionOutput:
    image_id: int
    scores: np.ndarray  # (n, C)
    boxes: np.ndarray  # (n, 4)

    def __post_init__(self):
        if self.scores.ndim != 2 or len(self.scores) != len(self.boxes):
            raise ValueError("scores must be (n, C) with one row per box")


@dataclass(frozen=True)
class DetectorModel:
    model_id: int
    family: str
    view: tuple[int, ...]
    num_classes: int
    feature_dim: int
    seed: int = 0
    neg_iou: float = 0.3
    neg_per_image: int = 24
    params: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown detector family {self.family!r}")

    @property
    def trained(self) -> bool:
        return self.params is not None

    def score_features(self, feats: np.ndarray) -> np.ndarray:
        if not self.trained:
            raise RuntimeError(f"model {self.model_id} is not trained")
        x = feats[:, view_columns(self.view, self.feature_dim)]
        probs = _PREDICT[self.family](self.params, x)
        return np.clip(probs[:, : self.num_classes], 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "family": self.family,
            "view": list(self.view),
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "seed": self.seed,
            "neg_iou": self.neg_iou,
            "neg_per_image": self.neg_per_image,
            "params": None if self.params is None else {k: np.asarray(v).tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DetectorModel":
        params = obj.get("params")
        if params is not None:
            params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        return cls(
            model_id=int(obj["model_id"]),
            family=obj["family"],
            view=tuple(int(v) for v in obj["view"]),
            num_classes=int(obj["num_classes"]),
            feature_dim=int(obj["feature_dim"]),
            seed=int(obj.get("seed", 0)),
            neg_iou=float(obj.get("neg_iou", 0.3)),
            neg_per_image=int(obj.get("neg_per_image", 24)),
            params=params,
        )


# -- families ----------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fit_prototype(x, y, k):
    means = np.stack([x[y == c].mean(0) for c in range(k)])
    resid = x - means[y]
    # pooled per-class variance, each class weighted equally
    var = np.stack([(resid[y == c] ** 2).mean(0) for c in range(k)]).mean(0)
    return {"means": means, "inv_var": 1.0 / np.maximum(var, 1e-6)}


def _predict_prototype(p, x):
    d2 = (((x[:, None, :] - p["means"][None]) ** 2) * p["inv_var"]).sum(-1)
    return _softmax(-0.5 * d2)


def _fit_linear(x, y, k, passes=150, lr=0.5, l2=1e-2):
    mu, sd = x.mean(0), x.std(0) + 1e-6
    z = np.hstack([(x - mu) / sd, np.ones((len(x), 1))])
    onehot = np.eye(k)[y]
    counts = onehot.sum(0)
    sw = (1.0 / counts[y]) * (len(y) / k)
    w = np.zeros((z.shape[1], k))
    for _ in range(passes):
        grad = z.T @ ((_softmax(z @ w) - onehot) * sw[:, None]) / len(y) + l2 * w
        w -= lr * grad
    return {"mu": mu, "sd": sd, "w": w}


def _predict_linear(p, x):
    z = np.hstack([(x - p["mu"]) / p["sd"], np.ones((len(x), 1))])
    return _softmax(z @ p["w"])


def _fit_histogram(x, y, k, bins=6, alpha=1.0):
    qs = np.linspace(0, 1, bins + 1)[1:-1]
    edges = np.quantile(x, qs, axis=0).T  # (F, bins-1)
    codes = _bin_codes(x, edges)
    logp = np.zeros((k, x.shape[1], bins))
    for c in range(k):
        cc = codes[y == c]
        for f in range(x.shape[1]):
            counts = np.bincount(cc[:, f], minlength=bins) + alpha
            logp[c, f] = np.log(counts / counts.sum())
    return {"edges": edges, "logp": logp}


def _bin_codes(x, edges):
    return np.stack([np.searchsorted(edges[f], x[:, f], side="right") for f in range(x.shape[1])], axis=1)


def _predict_histogram(p, x):
    codes = _bin_codes(x, p["edges"])
    n_feat = x.shape[1]
    ll = np.stack([p["logp"][c, np.arange(n_feat), codes].sum(1) for c in range(p["logp"].shape[0])], axis=1)
    return _softmax(ll)


_FIT = {"prototype": _fit_prototype, "linear": _fit_linear, "histogram": _fit_histogram}
_PREDICT = {"prototype": _predict_prototype, "linear": _predict_linear, "histogram": _predict_histogram}


# -- public operations ---------------------------------------------------------

def training_matrix(model: DetectorModel, pool: Sequence[tuple[ImageRecord, Sequence[Annotation]]],
                    bank: ProposalBank, negatives_from: Collection[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Features and labels; background is label ``C``.

    Positives are the annotated boxes. Negatives are up to ``neg_per_image``
    proposals per image whose IoU with every annotation is below ``neg_iou``,
    half of them from the hard band that partially overlaps an annotation.
    When ``negatives_from`` is given, only those image ids contribute negatives
    (pseudo-labeled images may hold objects nobody annotated).
    """
    xs, ys = [], []
    for img, anns in pool:
        if anns:
            gt = boxes_to_array([a.box for a in anns])
            xs.append(box_features(img, gt))
            ys.append(np.array([a.class_id for a in anns]))
        if negatives_from is not None and img.image_id not in negatives_from:
            continue
        props, feats = bank.get(img.image_id)
        if len(props):
            overlap = iou_matrix(props, gt).max(1) if anns else np.zeros(len(props))
            rng = np.random.default_rng([model.seed, img.image_id])
            idx = _sample_negatives(rng, overlap, model.neg_iou, model.neg_per_image)
            xs.append(feats[idx])
            ys.append(np.full(len(idx), model.num_classes))
    if not xs:
        raise TrainingError("empty training pool")
    return np.concatenate(xs), np.concatenate(ys).astype(int)


def _sample_negatives(rng, overlap: np.ndarray, neg_iou: float, count: int) -> np.ndarray:
    """Up to ``count`` proposals below ``neg_iou``, half of them drawn from the hard band ``[0.1, neg_iou)``."""
    hard = np.flatnonzero((overlap >= 0.1) & (overlap < neg_iou))
    easy = np.flatnonzero(overlap < min(0.1, neg_iou))
    n_hard = min(len(hard), count // 2)
    n_easy = min(len(easy), count - n_hard)
    picked = np.concatenate([
        rng.choice(hard, n_hard, replace=False) if n_hard else np.zeros(0, dtype=int),
        rng.choice(easy, n_easy, replace=False) if n_easy else np.zeros(0, dtype=int),
    ])
    return np.sort(picked).astype(int)


def train(model: DetectorModel, pool: Sequence[tuple[ImageRecord, Sequence[Annotation]]],
          bank: ProposalBank, negatives_from: Collection[int] | None = None) -> DetectorModel:
    x, y = training_matrix(model, pool, bank, negatives_from)
    counts = np.bincount(y, minlength=model.num_classes + 1)
    missing = [c for c in range(model.num_classes) if counts[c] == 0]
    if missing:
        raise TrainingError(f"model {model.model_id}: no positives for classes {missing}")
    if counts[model.num_classes] == 0:
        raise TrainingError(f"model {model.model_id}: no background samples")
    cols = view_columns(model.view, model.feature_dim)
    params = _FIT[model.family](x[:, cols], y, model.num_classes + 1)
    return replace(model, params=params)


def score(model: DetectorModel, img: ImageRecord, proposals: np.ndarray) -> DetectionOutput:
    proposals = np.asarray(proposals, dtype=float).reshape(-1, 4)
    scores = model.score_features(box_features(img, proposals))
    return DetectionOutput(img.image_id, scores, proposals.copy())


def fuse(outputs: Sequence[DetectionOutput]) -> DetectionOutput:
    """Element-wise mean of score matrices and box coordinates."""
    if not outputs:
        raise ValueError("nothing to fuse")
    first = outputs[0]
    for out in outputs[1:]:
        if out.scores.shape != first.scores.shape or out.image_id != first.image_id:
            raise ValueError("fused outputs must cover the same image and proposal list")
    if len(outputs) == 1:
        return first
    scores = _order_free_mean([o.scores for o in outputs])
    boxes = _order_free_mean([o.boxes for o in outputs])
    return DetectionOutput(first.image_id, scores, boxes)


def _order_free_mean(arrays) -> np.ndarray:
    # sorting makes the result independent of argument order; offsetting by
    # the minimum makes the mean of identical copies exact
    s = np.sort(np.stack(arrays), axis=0)
    return s[0] + (s - s[0]).mean(axis=0)
