"""Brute-force minimizers of the selection objective, for checking the closed-form update.

Enumeration works row-wise: each unlabeled image picks one of ``C + 1``
options (no class, or exactly one class), which covers every matrix that
satisfies the one-class-per-image and binary constraints.
"""
from __future__ import annotations

import itertools
from fractions import Fraction
from typing import Sequence

import numpy as np

from .selector import SelectionMatrix

MAX_CONFIGS = 4 ** 8
MAX_JOINT = 200_000


class InstanceTooLarge(ValueError):
    pass


def _row_configs(u: int, num_classes: int) -> np.ndarray:
    """``(K, u)`` option codes: 0 means unselected, ``c + 1`` selects class ``c``."""
    if u == 0:
        return np.zeros((1, 0), dtype=int)
    return np.array(list(itertools.product(range(num_classes + 1), repeat=u)), dtype=int)


def _to_matrix(config: np.ndarray, num_classes: int) -> np.ndarray:
    v = np.zeros((len(config), num_classes), dtype=np.int8)
    rows = np.flatnonzero(config > 0)
    v[rows, config[rows] - 1] = 1
    return v


def _lex_rank(configs: np.ndarray, num_classes: int) -> np.ndarray:
    # row-major order of the 0/1 matrix: "none" < class C-1 < ... < class 0
    return np.where(configs == 0, 0, num_classes + 1 - configs)


def _lex_smallest(candidates: np.ndarray, ranks: np.ndarray) -> int:
    keys = ranks[candidates]
    if keys.shape[1] == 0:
        return int(candidates[0])
    order = np.lexsort(keys.T[::-1])
    return int(candidates[order[0]])


def _gain_table(losses_j: np.ndarray, lambdas_j: np.ndarray, gamma_row: np.ndarray | None,
                others: Sequence[SelectionMatrix]) -> np.ndarray:
    """``(u, C + 1)`` objective contribution of each row option for one model."""
    u, num_classes = losses_j.shape
    gain = losses_j - np.asarray(lambdas_j, dtype=float)[None, :]
    for other in others:
        gain = gain - gamma_row[other.model_id] * other.v
    gain = np.where(np.isinf(losses_j), np.inf, gain)
    return np.hstack([np.zeros((u, 1)), gain])


def _exact_table(losses_j, lambdas_j, gamma_row, others) -> list[list[Fraction | None]]:
    """The gain table in rational arithmetic; ``None`` marks an infinite loss."""
    u, num_classes = losses_j.shape
    rows = []
    for i in range(u):
        row = [Fraction(0)]
        for c in range(num_classes):
            if not np.isfinite(losses_j[i, c]):
                row.append(None)
                continue
            g = Fraction(float(losses_j[i, c])) - Fraction(float(lambdas_j[c]))
            for other in others:
                if other.v[i, c]:
                    g -= Fraction(float(gamma_row[other.model_id]))
            row.append(g)
        rows.append(row)
    return rows


def _exact_minimizers(values: np.ndarray, configs: np.ndarray, exact_table) -> np.ndarray:
    """Indices of configurations whose exact value is minimal.

    Float sums only shortlist candidates; the shortlist is re-scored exactly so
    that rounding never separates configurations that tie.
    """
    low = values.min()
    if not np.isfinite(low):
        return np.flatnonzero(values == low)
    short = np.flatnonzero(values <= low + 1e-9 * (1.0 + abs(low)))
    exact = [sum((exact_table[i][o] for i, o in enumerate(configs[n])), Fraction(0)) for n in short]
    best = min(exact)
    return np.asarray([n for n, e in zip(short, exact) if e == best], dtype=int)


def brute_force_best_v(losses_j: np.ndarray, lambdas_j: np.ndarray, gamma: np.ndarray | None = None,
                       others: Sequence[SelectionMatrix] = (), model_id: int = 0,
                       shuffle_seed: int | None = None) -> SelectionMatrix:
    """Exhaustive minimizer of model ``model_id``'s block of the objective.

    Ties are resolved to the lexicographically smallest matrix, so the answer
    does not depend on enumeration order (``shuffle_seed`` permutes it).
    """
    losses_j = np.asarray(losses_j, dtype=float)
    u, num_classes = losses_j.shape
    if (num_classes + 1) ** u > MAX_CONFIGS:
        raise InstanceTooLarge(f"{(num_classes + 1) ** u} configurations exceed {MAX_CONFIGS}")
    gamma_row = None if gamma is None else np.asarray(gamma, dtype=float)[model_id]
    table = _gain_table(losses_j, lambdas_j, gamma_row, others)
    configs = _row_configs(u, num_classes)
    if shuffle_seed is not None:
        configs = configs[np.random.default_rng(shuffle_seed).permutation(len(configs))]
    values = table[np.arange(u)[None, :], configs].sum(axis=1) if u else np.zeros(1)
    best = _exact_minimizers(values, configs, _exact_table(losses_j, lambdas_j, gamma_row, others))
    pick = _lex_smallest(best, _lex_rank(configs, num_classes))
    return SelectionMatrix(model_id, _to_matrix(configs[pick], num_classes), np.asarray(lambdas_j, dtype=float))


def brute_force_joint(losses: np.ndarray, lambdas: np.ndarray, gamma: np.ndarray) -> list[SelectionMatrix]:
    """Exact joint minimizer over every model's selection matrix."""
    losses = np.asarray(losses, dtype=float)
    lambdas = np.asarray(lambdas, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    m, u, num_classes = losses.shape
    configs = _row_configs(u, num_classes)
    k = len(configs)
    if k ** m > MAX_JOINT:
        raise InstanceTooLarge(f"{k ** m} joint configurations exceed {MAX_JOINT}")
    rows = np.arange(u)[None, :]
    base = [
        (_gain_table(losses[j], lambdas[j], None, ())[rows, configs].sum(axis=1) if u else np.zeros(1))
        for j in range(m)
    ]
    agree = ((configs[:, None, :] == configs[None, :, :]) & (configs[:, None, :] > 0)).sum(-1)
    idx = np.stack(np.meshgrid(*[np.arange(k)] * m, indexing="ij"), axis=-1).reshape(-1, m)
    values = np.zeros(len(idx))
    for j in range(m):
        values += base[j][idx[:, j]]
    for j1 in range(m):
        for j2 in range(j1 + 1, m):
            values -= gamma[j1, j2] * agree[idx[:, j1], idx[:, j2]]
    best = np.flatnonzero(values == values.min())
    ranks = _lex_rank(configs, num_classes)
    joint_ranks = np.concatenate([ranks[idx[:, j]] for j in range(m)], axis=1)
    pick = _lex_smallest(best, joint_ranks)
    return [SelectionMatrix(j, _to_matrix(configs[idx[pick, j]], num_classes), lambdas[j]) for j in range(m)]


# -- equivalence harness ---------------------------------------------------------

def random_instance(rng: np.random.Generator, max_u: int = 8, max_classes: int = 3,
                    inf_rate: float = 0.2) -> tuple[np.ndarray, tuple[int, ...]]:
    """Single-model losses ``(1, u, C)`` with some infinite entries, plus per-class targets."""
    u = int(rng.integers(1, max_u + 1))
    num_classes = int(rng.integers(1, max_classes + 1))
    losses = rng.uniform(0.0, 2.0, (1, u, num_classes))
    losses[rng.random((1, u, num_classes)) < inf_rate] = np.inf
    targets = tuple(int(r) for r in rng.integers(0, u + 2, num_classes))
    return losses, targets


def check_equivalence(n_instances: int, seed: int, row_rule: str = "margin") -> list[dict]:
    """Compare ``update_v`` against the brute-force minimizer on seeded random instances.

    Returns one record per instance; ``exact`` is True when both selections give
    the identical objective value.
    """
    from .selector import PaceState, objective, update_v

    rng = np.random.default_rng(seed)
    records = []
    for n in range(n_instances):
        losses, targets = random_instance(rng)
        pace = PaceState(1, targets, np.zeros((1, 1)))
        fast = update_v(0, losses, pace, (), row_rule)
        slow = brute_force_best_v(losses[0], fast.thresholds)
        zero = np.zeros((1, 1))
        got = objective(losses, [fast], fast.thresholds[None], zero)
        best = objective(losses, [slow], fast.thresholds[None], zero)
        records.append({"instance": n, "u": losses.shape[1], "classes": losses.shape[2],
                         "update_v": got, "oracle": best, "exact": got == best})
    return records
