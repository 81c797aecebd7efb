"""Self-paced, multi-model selection of unlabeled images.

Losses are a tensor ``L[j, i, c]`` over models, unlabeled images and classes.
A model's selection matrix ``V^j`` is binary with at most one class per image.
The pace parameter is kept in count form: ``R[c]`` images per class. The
scalar threshold it implies is recovered as the midpoint between the
``R``-th and ``(R+1)``-th smallest finite adjusted losses of the class.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

ROW_RULES = ("margin", "loss")


@dataclass(frozen=True)
class SelectionMatrix:
    model_id: int
    v: np.ndarray  # (u, C) of 0/1
    thresholds: np.ndarray | None = field(default=None, compare=False)  # implied lambda per class

    def __post_init__(self):
        v = np.asarray(self.v)
        if v.ndim != 2:
            raise ValueError("selection matrix must be 2-D")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("entries must be 0 or 1")
        if v.size and v.sum(axis=1).max() > 1:
            raise ValueError("at most one class per image")
        object.__setattr__(self, "v", v.astype(np.int8))

    @classmethod
    def zeros(cls, model_id: int, u: int, num_classes: int) -> "SelectionMatrix":
        return cls(model_id, np.zeros((u, num_classes), dtype=np.int8))

    @property
    def selected_rows(self) -> np.ndarray:
        return np.flatnonzero(self.v.any(axis=1))

    def class_counts(self) -> np.ndarray:
        return self.v.sum(axis=0)


@dataclass(frozen=True)
class PaceState:
    iteration: int
    targets: tuple[int, ...]  # R[c]
    gamma: np.ndarray = field(default_factory=lambda: np.zeros((1, 1)), compare=False)

    def __post_init__(self):
        if self.iteration < 1:
            raise ValueError("iteration starts at 1")
        g = np.asarray(self.gamma, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError("gamma must be square")
        if (g < 0).any() or not np.allclose(g, g.T) or np.any(np.diag(g) != 0):
            raise ValueError("gamma must be non-negative, symmetric, with zero diagonal")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "targets", tuple(int(r) for r in self.targets))

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "targets": list(self.targets), "gamma": self.gamma.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "PaceState":
        return cls(int(obj["iteration"]), tuple(obj["targets"]), np.asarray(obj["gamma"], dtype=float))


def default_gamma(m: int) -> float:
    if m < 2:
        raise ValueError("gamma is only defined for two or more models")
    return 0.2 / (m - 1)


def gamma_matrix(m: int, value: float | None = None) -> np.ndarray:
    """Uniform off-diagonal coupling; a single model gets a 1x1 zero matrix."""
    if m < 2:
        return np.zeros((m, m))
    g = np.full((m, m), default_gamma(m) if value is None else value)
    np.fill_diagonal(g, 0.0)
    return g


def advance_pace(pace: PaceState) -> PaceState:
    """``R <- round_half_up(R * (k + 1) / k)`` and ``k <- k + 1``."""
    k = pace.iteration
    targets = tuple((2 * r * (k + 1) + k) // (2 * k) for r in pace.targets)
    return replace(pace, iteration=k + 1, targets=targets)


def adjusted_losses(j: int, losses: np.ndarray, gamma: np.ndarray,
                    others: Sequence[SelectionMatrix]) -> np.ndarray:
    """``L[j] - sum_k gamma[j, k] * V^k`` over the other models."""
    adj = np.array(losses[j], dtype=float, copy=True)
    for other in others:
        k = other.model_id
        if k == j:
            raise ValueError("others must not contain the model being updated")
        g = gamma[j, k]
        if g:
            adj = adj - g * other.v
    return adj


def implied_threshold(column: np.ndarray, count: int) -> float:
    """Threshold that admits exactly the ``count`` smallest finite entries (absent ties)."""
    a = np.sort(column[np.isfinite(column)])
    if len(a) == 0:
        return 0.0
    if count <= 0:
        return float(a[0])
    if count >= len(a):
        return float(a[-1] + 1.0)
    return float((a[count - 1] + a[count]) / 2.0)


def _exact(x: np.ndarray) -> np.ndarray:
    """Object array of ``Fraction`` (``None`` for non-finite entries)."""
    out = np.empty(x.shape, dtype=object)
    for idx, val in np.ndenumerate(x):
        out[idx] = Fraction(float(val)) if np.isfinite(val) else None
    return out


def threshold_select(adjusted: np.ndarray, thresholds: np.ndarray, row_rule: str = "margin",
                     exact: np.ndarray | None = None) -> np.ndarray:
    """Select ``A < lambda`` entries, then keep one class per image.

    ``row_rule="margin"`` keeps the class with the most negative ``A - lambda``,
    which is the exact minimizer of the model's block of the objective.
    ``row_rule="loss"`` keeps the class with the lowest ``A``. The two agree when
    every class shares one threshold. Ties go to the lowest class index.

    Comparisons are done in exact rational arithmetic on ``exact`` (the
    adjusted losses as fractions, defaulting to the float values), so ties
    are real ties rather than rounding artifacts.
    """
    if row_rule not in ROW_RULES:
        raise ValueError(f"row_rule must be one of {ROW_RULES}")
    adjusted = np.asarray(adjusted, dtype=float)
    if exact is None:
        exact = _exact(adjusted)
    lam = [Fraction(float(t)) for t in np.asarray(thresholds, dtype=float)]
    v = np.zeros(adjusted.shape, dtype=np.int8)
    for i in range(adjusted.shape[0]):
        best, best_key = -1, None
        for c, a in enumerate(exact[i]):
            if a is None or not a < lam[c]:
                continue
            key = a - lam[c] if row_rule == "margin" else a
            if best_key is None or key < best_key:
                best, best_key = c, key
        if best >= 0:
            v[i, best] = 1
    return v


def update_v(j: int, losses: np.ndarray, pace: PaceState, others: Sequence[SelectionMatrix],
             row_rule: str = "margin") -> SelectionMatrix:
    """Closed-form update of model ``j``'s selection with the others held fixed.

    ``losses`` is the full ``(m, u, C)`` tensor. Entries selected by other
    models have their loss lowered by the coupling weight, which makes those
    images easier to select for model ``j``.
    """
    losses = np.asarray(losses, dtype=float)
    adj = adjusted_losses(j, losses, pace.gamma, others)
    u, num_classes = adj.shape
    if len(pace.targets) != num_classes:
        raise ValueError("pace targets must have one entry per class")
    lam = np.array([implied_threshold(adj[:, c], pace.targets[c]) for c in range(num_classes)])
    exact = _exact(losses[j])
    for other in others:
        g = Fraction(float(pace.gamma[j, other.model_id]))
        if g:
            for i, c in zip(*np.nonzero(other.v)):
                if exact[i, c] is not None:
                    exact[i, c] -= g
    return SelectionMatrix(j, threshold_select(adj, lam, row_rule, exact), lam)


def objective(losses: np.ndarray, selections: Sequence[SelectionMatrix] | np.ndarray,
              lambdas: np.ndarray, gamma: np.ndarray) -> float:
    """Selection-dependent part of the MSPLD energy.

    ``sum v*L - sum lambda*v - sum_{j1<j2} gamma * <V^j1, V^j2>``. Unselected
    entries contribute nothing even when their loss is infinite; a selected
    infinite loss is an error. The terms are added with ``math.fsum``, so the
    result is the correctly rounded value of the exact sum and does not depend
    on term order.
    """
    losses = np.asarray(losses, dtype=float)
    vs = np.stack([s.v if isinstance(s, SelectionMatrix) else np.asarray(s) for s in selections]).astype(float)
    lambdas = np.asarray(lambdas, dtype=float).reshape(len(vs), -1)
    gamma = np.asarray(gamma, dtype=float)
    sel = vs > 0
    if np.isinf(losses[sel]).any():
        raise ValueError("a selected entry has infinite loss")
    terms = list(losses[sel])
    terms += list(-np.broadcast_to(lambdas[:, None, :], vs.shape)[sel])
    m = len(vs)
    for j1 in range(m):
        for j2 in range(j1 + 1, m):
            g = gamma[j1, j2]
            if g:
                terms += [-g] * int((sel[j1] & sel[j2]).sum())
    return math.fsum(terms)
