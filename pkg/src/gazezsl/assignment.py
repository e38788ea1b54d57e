"""Exact minimum-cost one-to-one assignment between two channel sets.

``hungarian`` is the production O(D^3) solver (shortest augmenting paths
with potentials); ``brute_force_assignment`` enumerates all permutations
and exists purely as the test oracle. Only the optimal total cost is
contractual when several permutations tie.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Assignment:
    """permutation[p] is the column matched to row p; total_cost is the sum of picked entries."""

    permutation: tuple[int, ...]
    total_cost: float


def _validated(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    return c


def hungarian(cost) -> Assignment:
    """Minimum-total-cost perfect matching of a square cost matrix.

    Classic potentials formulation: rows are inserted one at a time and an
    augmenting path of minimal reduced cost is grown column by column.
    """
    c = _validated(cost)
    n = c.shape[0]
    inf = np.inf
    # 1-based potentials; p[j] = row currently matched to column j
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    perm = [0] * n
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    total = float(sum(c[i, perm[i]] for i in range(n)))
    return Assignment(tuple(perm), total)


def brute_force_assignment(cost) -> Assignment:
    """Exhaustive minimum over all D! permutations; guarded at D <= 8."""
    c = _validated(cost)
    n = c.shape[0]
    if n > 8:
        raise ValueError(f"brute force assignment is limited to D <= 8, got D={n}")
    rows = np.arange(n)
    best_perm = None
    best_cost = np.inf
    for perm in itertools.permutations(range(n)):
        total = float(c[rows, perm].sum())
        if total < best_cost:
            best_cost = total
            best_perm = perm
    return Assignment(best_perm, best_cost)
