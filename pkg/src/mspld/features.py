"""Box feature pooling over an image's feature grid, plus a per-image proposal cache."""
from __future__ import annotations

import numpy as np

from .data import DatasetSplit, ImageRecord, ProposalConfig, generate_proposals
from .geometry import iou_matrix

RING = 0.3  # context strip width, as a fraction of the box side
BLOCKS = 8


def _weights(lo: np.ndarray, hi: np.ndarray, n_cells: int, cell: float) -> np.ndarray:
    edges = np.arange(n_cells + 1) * cell
    w = np.minimum(hi[:, None], edges[None, 1:]) - np.maximum(lo[:, None], edges[None, :-1])
    return np.clip(w, 0, None) / cell


def _pooled_sum(grid: np.ndarray, boxes: np.ndarray, height: float, width: float):
    gh, gw, _ = grid.shape
    rw = _weights(boxes[:, 0], boxes[:, 2], gh, height / gh)
    cw = _weights(boxes[:, 1], boxes[:, 3], gw, width / gw)
    total = ((rw @ grid.reshape(gh, -1)).reshape(len(boxes), gw, -1) * cw[:, :, None]).sum(1)
    area = rw.sum(1) * cw.sum(1)
    return total, area


def _region_means(img: ImageRecord, regions: np.ndarray) -> np.ndarray:
    total, area = _pooled_sum(img.feature_grid, regions, img.height, img.width)
    return np.where((area > 0.25)[:, None], total / np.maximum(area, 1e-9)[:, None], 0.0)


def _regions(boxes: np.ndarray, height: float, width: float) -> list[np.ndarray]:
    up, left, bottom, right = boxes.T
    cy, cx = (up + bottom) / 2, (left + right) / 2
    dh, dw = RING * (bottom - up), RING * (right - left)
    quads = [
        (up, left, cy, cx), (up, cx, cy, right),
        (cy, left, bottom, cx), (cy, cx, bottom, right),
    ]
    strips = [
        (up - dh, left, up, right), (bottom, left, bottom + dh, right),
        (up, left - dw, bottom, left), (up, right, bottom, right + dw),
    ]
    out = []
    for r in quads + strips:
        reg = np.stack(r, axis=1)
        reg[:, [0, 2]] = np.clip(reg[:, [0, 2]], 0, height)
        reg[:, [1, 3]] = np.clip(reg[:, [1, 3]], 0, width)
        out.append(reg)
    return out


def box_features(img: ImageRecord, boxes: np.ndarray) -> np.ndarray:
    """``(n, BLOCKS * D)`` features, block-major.

    Blocks are the cell means of the box's four quadrants (top-left, top-right,
    bottom-left, bottom-right) followed by its four context strips (above,
    below, left, right). Strips falling outside the image read as zero.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    d = img.feature_grid.shape[2]
    if len(boxes) == 0:
        return np.zeros((0, BLOCKS * d))
    return np.concatenate([_region_means(img, r) for r in _regions(boxes, img.height, img.width)], axis=1)


def view_columns(view: tuple[int, ...], feature_dim: int) -> np.ndarray:
    """Columns of a ``box_features`` matrix visible to a model with channel subset ``view``."""
    view = np.asarray(view, dtype=int)
    return np.concatenate([view + b * feature_dim for b in range(BLOCKS)])


class ProposalBank:
    """Lazily computed proposals and their features, keyed by image id."""

    def __init__(self, data: DatasetSplit, cfg: ProposalConfig, seed: int):
        self.data = data
        self.cfg = cfg
        self.seed = seed
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._overlaps: dict[int, np.ndarray] = {}

    def get(self, image_id: int) -> tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(image_id)
        if hit is None:
            img = self.data[image_id]
            boxes = generate_proposals(img, self.cfg, self.seed).proposals
            hit = (boxes, box_features(img, boxes))
            self._cache[image_id] = hit
        return hit

    def overlaps(self, image_id: int) -> np.ndarray:
        """Pairwise IoU among the image's proposals."""
        hit = self._overlaps.get(image_id)
        if hit is None:
            boxes = self.proposals(image_id)
            hit = self._overlaps[image_id] = iou_matrix(boxes, boxes)
        return hit

    def proposals(self, image_id: int) -> np.ndarray:
        return self.get(image_id)[0]

    def features(self, image_id: int) -> np.ndarray:
        return self.get(image_id)[1]
