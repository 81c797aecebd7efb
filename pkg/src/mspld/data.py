"""Synthetic detection datasets: scenes, splits, initial labels, proposals, persistence.

Images are coarse feature grids rather than pixels. Each grid cell holds a
``D``-dimensional feature vector; an object paints the cells it covers with
its class signature plus noise, blended by fractional cell coverage.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import BBox, boxes_to_array, clip_boxes, iou_matrix

log = logging.getLogger(__name__)

FEATURE_DECIMALS = 4


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed; carries line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


@dataclass(frozen=True)
class Annotation:
    box: BBox
    class_id: int


@dataclass(eq=False)
class ImageRecord:
    image_id: int
    width: float
    height: float
    objects: list[Annotation]
    feature_grid: np.ndarray  # (grid_h, grid_w, D)
    is_distractor: bool = False
    # extents of non-target objects; visible to proposals, never labeled
    clutter: list[BBox] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.width == other.width
            and self.height == other.height
            and self.objects == other.objects
            and self.is_distractor == other.is_distractor
            and self.clutter == other.clutter
            and self.feature_grid.shape == other.feature_grid.shape
            and np.array_equal(self.feature_grid, other.feature_grid)
        )

    @property
    def class_set(self) -> set[int]:
        return {a.class_id for a in self.objects}

    def gt_array(self) -> np.ndarray:
        return boxes_to_array([a.box for a in self.objects])


@dataclass(eq=False)
class DatasetSplit:
    images: list[ImageRecord]
    num_classes: int
    labeled_ids: set[int] = field(default_factory=set)
    unlabeled_ids: set[int] = field(default_factory=set)
    test_ids: set[int] = field(default_factory=set)

    def __post_init__(self):
        self._by_id = {img.image_id: img for img in self.images}
        if len(self._by_id) != len(self.images):
            raise ValueError("duplicate image ids")
        if (self.labeled_ids & self.unlabeled_ids) or (self.labeled_ids & self.test_ids) or (
            self.unlabeled_ids & self.test_ids
        ):
            raise ValueError("labeled/unlabeled/test ids must be pairwise disjoint")

    def __eq__(self, other):
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.labeled_ids == other.labeled_ids
            and self.unlabeled_ids == other.unlabeled_ids
            and self.test_ids == other.test_ids
            and self.images == other.images
        )

    def __getitem__(self, image_id: int) -> ImageRecord:
        return self._by_id[image_id]

    def subset(self, ids: Iterable[int]) -> list[ImageRecord]:
        return [self._by_id[i] for i in sorted(ids)]

    @property
    def trainval_ids(self) -> set[int]:
        return self.labeled_ids | self.unlabeled_ids


@dataclass(frozen=True)
class ProposalSet:
    image_id: int
    proposals: np.ndarray  # (n, 4) as [up, left, bottom, right]

    def __len__(self):
        return len(self.proposals)

    def boxes(self) -> list[BBox]:
        return [BBox.from_seq(row) for row in self.proposals]


@dataclass
class SceneSpec:
    num_images: int = 450
    num_classes: int = 4
    width: float = 64.0
    height: float = 64.0
    grid: int = 16
    feature_dim: int = 12
    max_objects: int = 3
    min_object_size: float = 12.0
    max_object_size: float = 28.0
    max_overlap: float = 0.15
    signature_scale: float = 1.0
    instance_sigma: float = 0.35
    noise_sigma: float = 1.2
    distractor_fraction: float = 0.0
    test_fraction: float = 1.0 / 3.0


@dataclass
class ProposalConfig:
    n: int = 100
    jitter: float = 0.2
    random_fraction: float = 0.3
    min_size: float = 4.0


def class_signatures(spec: SceneSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class signatures ``(C, D)`` and one out-of-vocabulary signature ``(D,)``."""
    rng = np.random.default_rng([seed, 0x5167])
    sigs = rng.normal(0.0, spec.signature_scale, size=(spec.num_classes + 1, spec.feature_dim))
    return sigs[:-1], sigs[-1]


def _coverage(lo: float, hi: float, n_cells: int, cell: float) -> np.ndarray:
    edges = np.arange(n_cells + 1) * cell
    return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0, None) / cell


def _place_boxes(rng, spec: SceneSpec, count: int) -> list[BBox]:
    placed: list[BBox] = []
    for _ in range(count):
        for _attempt in range(50):
            h = rng.uniform(spec.min_object_size, spec.max_object_size)
            w = rng.uniform(spec.min_object_size, spec.max_object_size)
            up = rng.uniform(0, spec.height - h)
            left = rng.uniform(0, spec.width - w)
            cand = BBox(up, left, up + h, left + w)
            if not placed or iou_matrix(boxes_to_array([cand]), boxes_to_array(placed)).max() <= spec.max_overlap:
                placed.append(cand)
                break
    return placed


def _render(rng, spec: SceneSpec, boxes: Sequence[BBox], signatures: Sequence[np.ndarray]) -> np.ndarray:
    g, d = spec.grid, spec.feature_dim
    ch, cw = spec.height / g, spec.width / g
    grid = rng.normal(0.0, spec.noise_sigma, size=(g, g, d))
    for box, sig in zip(boxes, signatures):
        appearance = sig + rng.normal(0.0, spec.instance_sigma, size=d)
        cells = appearance + rng.normal(0.0, spec.noise_sigma, size=(g, g, d))
        cover = np.outer(_coverage(box.up, box.bottom, g, ch), _coverage(box.left, box.right, g, cw))[..., None]
        grid = (1.0 - cover) * grid + cover * cells
    return np.round(grid, FEATURE_DECIMALS)


def _make_image(spec: SceneSpec, seed: int, image_id: int, sigs: np.ndarray, oov: np.ndarray,
                distractor: bool) -> ImageRecord:
    rng = np.random.default_rng([seed, image_id, int(distractor)])
    count = int(rng.integers(1, spec.max_objects + 1))
    boxes = _place_boxes(rng, spec, count)
    if distractor:
        grid = _render(rng, spec, boxes, [oov] * len(boxes))
        return ImageRecord(image_id, spec.width, spec.height, [], grid, True, list(boxes))
    classes = [int(c) for c in rng.integers(0, spec.num_classes, size=len(boxes))]
    grid = _render(rng, spec, boxes, [sigs[c] for c in classes])
    objects = [Annotation(b, c) for b, c in zip(boxes, classes)]
    return ImageRecord(image_id, spec.width, spec.height, objects, grid, False)


def generate_synthetic_dataset(spec: SceneSpec, seed: int) -> DatasetSplit:
    """Deterministic synthetic scenes.

    ``round(distractor_fraction * num_images)`` of the images are distractors;
    they all join the unlabeled pool. The clean images are split into train
    and test by ``test_fraction``. Each image draws from its own seeded stream,
    so adding distractors leaves the clean images unchanged.
    """
    if spec.num_classes < 2:
        raise ValueError("need at least 2 classes")
    if spec.num_classes > 8:
        raise ValueError("at most 8 classes are supported")
    if spec.min_object_size > min(spec.width, spec.height) or spec.min_object_size > spec.max_object_size:
        raise ValueError("image too small to place one object")
    max_size = min(spec.max_object_size, spec.width, spec.height)
    spec = replace(spec, max_object_size=max_size)

    n_distract = int(round(spec.distractor_fraction * spec.num_images))
    n_clean = spec.num_images - n_distract
    n_test = int(round(spec.test_fraction * n_clean))
    sigs, oov = class_signatures(spec, seed)

    images = [_make_image(spec, seed, i, sigs, oov, False) for i in range(n_clean)]
    images += [_make_image(spec, seed, n_clean + i, sigs, oov, True) for i in range(n_distract)]
    n_train = n_clean - n_test
    unlabeled = set(range(n_train)) | set(range(n_clean, n_clean + n_distract))
    test = set(range(n_train, n_clean))
    return DatasetSplit(images, spec.num_classes, set(), unlabeled, test)


def sample_initial_labels(d: DatasetSplit, k: int, seed: int) -> DatasetSplit:
    """Label images until every class has at least ``k`` labeled exemplar images.

    Classes are visited in index order; candidates for each class are shuffled
    with ``seed``. An image labeled for one class counts for every class it
    contains, and all of its boxes become annotated.
    """
    rng = np.random.default_rng([seed, 0x1AB])
    labeled = set(d.labeled_ids)
    pool = sorted(d.labeled_ids | d.unlabeled_ids)
    for c in range(d.num_classes):
        candidates = [i for i in pool if c in d[i].class_set]
        if len(candidates) < k:
            raise ValueError(f"class {c} has only {len(candidates)} candidate images, need {k}")
        have = sum(1 for i in candidates if i in labeled)
        for idx in rng.permutation(len(candidates)):
            if have >= k:
                break
            i = candidates[idx]
            if i not in labeled:
                labeled.add(i)
                have += 1
    unlabeled = set(d.unlabeled_ids) - labeled
    return DatasetSplit(d.images, d.num_classes, labeled, unlabeled, set(d.test_ids))


def generate_proposals(img: ImageRecord, cfg: ProposalConfig, seed: int) -> ProposalSet:
    """Class-agnostic proposals: jittered object extents plus uniform random rectangles.

    Object extents come from both annotations and clutter; class ids are never read.
    """
    if cfg.n <= 0:
        return ProposalSet(img.image_id, np.zeros((0, 4)))
    rng = np.random.default_rng([seed, img.image_id, 0x9E0])
    extents = boxes_to_array([a.box for a in img.objects] + list(img.clutter))
    n_random = int(round(cfg.random_fraction * cfg.n)) if len(extents) else cfg.n
    n_jitter = cfg.n - n_random
    out = []
    if n_jitter:
        src = extents[np.arange(n_jitter) % len(extents)]
        h = src[:, 2] - src[:, 0]
        w = src[:, 3] - src[:, 1]
        cy = (src[:, 0] + src[:, 2]) / 2 + rng.normal(0, cfg.jitter, n_jitter) * h
        cx = (src[:, 1] + src[:, 3]) / 2 + rng.normal(0, cfg.jitter, n_jitter) * w
        h = h * np.exp(rng.normal(0, cfg.jitter, n_jitter))
        w = w * np.exp(rng.normal(0, cfg.jitter, n_jitter))
        out.append(np.stack([cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2], axis=1))
    if n_random:
        h = rng.uniform(cfg.min_size, img.height, n_random)
        w = rng.uniform(cfg.min_size, img.width, n_random)
        up = rng.uniform(0, 1, n_random) * (img.height - h)
        left = rng.uniform(0, 1, n_random) * (img.width - w)
        out.append(np.stack([up, left, up + h, left + w], axis=1))
    boxes = clip_boxes(np.concatenate(out), img.height, img.width, cfg.min_size)
    return ProposalSet(img.image_id, boxes)


# -- persistence -------------------------------------------------------------

def dataset_to_dict(d: DatasetSplit) -> dict:
    return {
        "num_classes": d.num_classes,
        "images": [
            {
                "id": img.image_id,
                "width": img.width,
                "height": img.height,
                "objects": [{"box": a.box.as_list(), "class_id": a.class_id} for a in img.objects],
                "feature_grid": img.feature_grid.tolist(),
                "is_distractor": img.is_distractor,
                "clutter": [b.as_list() for b in img.clutter],
            }
            for img in d.images
        ],
        "labeled_ids": sorted(d.labeled_ids),
        "unlabeled_ids": sorted(d.unlabeled_ids),
        "test_ids": sorted(d.test_ids),
    }


def dataset_from_dict(obj: dict) -> DatasetSplit:
    try:
        images = []
        for n, raw in enumerate(obj["images"]):
            try:
                grid = np.asarray(raw["feature_grid"], dtype=float)
                if grid.ndim != 3:
                    raise DatasetFormatError(f"images[{n}].feature_grid must be 3-dimensional")
                images.append(ImageRecord(
                    image_id=int(raw["id"]),
                    width=float(raw["width"]),
                    height=float(raw["height"]),
                    objects=[Annotation(BBox.from_seq(o["box"]), int(o["class_id"])) for o in raw["objects"]],
                    feature_grid=grid,
                    is_distractor=bool(raw["is_distractor"]),
                    clutter=[BBox.from_seq(b) for b in raw.get("clutter", [])],
                ))
            except KeyError as e:
                raise DatasetFormatError(f"images[{n}] missing key {e.args[0]!r}") from None
        return DatasetSplit(
            images,
            int(obj["num_classes"]),
            set(obj["labeled_ids"]),
            set(obj["unlabeled_ids"]),
            set(obj["test_ids"]),
        )
    except KeyError as e:
        raise DatasetFormatError(f"missing top-level key {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, DatasetFormatError):
            raise
        raise DatasetFormatError(f"invalid dataset content: {e}") from None


def save_dataset(d: DatasetSplit, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset_to_dict(d), fh, separators=(",", ":"))
    return path


def load_dataset(path: str | Path) -> DatasetSplit:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"malformed JSON: {e.msg}", e.lineno, e.colno) from None
    return dataset_from_dict(obj)
