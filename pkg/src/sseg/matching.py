"""Minimum-cost assignment of K pseudo-masks to N predicted masks."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .losses import pair_cost  # noqa: F401  (re-exported: the matching cost)

BRUTE_FORCE_MAX_N = 8


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    total_cost: float
    unmatched_preds: set[int] = field(default_factory=set)

    @property
    def pred_for(self) -> dict[int, int]:
        return dict(self.pairs)


def _check(costs):
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise InputError("cost matrix must be 2-D")
    k, n = costs.shape
    if k > n:
        raise InputError(f"more pseudo-masks ({k}) than predictions ({n})")
    if not np.all(np.isfinite(costs)):
        raise InputError("cost matrix has non-finite entries")
    return costs


def _make_assignment(costs, cols):
    k, n = costs.shape
    pairs = [(i, int(j)) for i, j in enumerate(cols)]
    total = 0.0
    for i, j in pairs:
        total += float(costs[i, j])
    return Assignment(pairs, total, set(range(n)) - {j for _, j in pairs})


def _lex_less(a, b):
    """Row-wise lexicographic a < b for (M, D) arrays."""
    diff = a - b
    nz = diff != 0
    first = nz.argmax(axis=1)
    return diff[np.arange(len(diff)), first] < 0


def hungarian(costs) -> Assignment:
    """Rectangular Kuhn-Munkres with exact lexicographic tie-breaking.

    Costs are lifted into the ordered group R x Z^K: entry (i, j) becomes
    (c_ij, j * e_i). Total costs then compare first by the real cost and then by
    the tuple of chosen prediction indices, so the optimum is unique and equals the
    lexicographically smallest optimal pair list. The secondary parts are small
    integers and stay exact in float64.
    """
    costs = _check(costs)
    k, n = costs.shape
    if k == 0:
        return Assignment([], 0.0, set(range(n)))
    dim = k + 1
    # lifted[i, j] = (c_ij, 0, .., j at slot i+1, .., 0)
    lifted = np.zeros((k, n, dim))
    lifted[:, :, 0] = costs
    lifted[np.arange(k), :, np.arange(k) + 1] = np.arange(n, dtype=np.float64)[None, :]

    u = np.zeros((k + 1, dim))
    v = np.zeros((n + 1, dim))
    p = np.zeros(n + 1, dtype=np.int64)  # row (1-based) matched to column j; column 0 is a sentinel
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, k + 1):
        p[0] = i
        j0 = 0
        minv = np.full((n + 1, dim), np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = np.flatnonzero(~used)
            cur = lifted[i0 - 1, free - 1] - u[i0] - v[free]
            better = _lex_less(cur, minv[free])
            upd = free[better]
            minv[upd] = cur[better]
            way[upd] = j0
            cand = minv[free]
            order = np.lexsort(cand.T[::-1])
            j1 = int(free[order[0]])
            delta = minv[j1].copy()
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(k, dtype=np.int64)
    for j in range(1, n + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return _make_assignment(costs, cols)


def brute_force_match(costs) -> Assignment:
    """Enumerate every injective assignment; same tie-break as :func:`hungarian`."""
    costs = _check(costs)
    k, n = costs.shape
    if n > BRUTE_FORCE_MAX_N:
        raise InputError(f"brute force refuses N={n} > {BRUTE_FORCE_MAX_N}")
    best_key = None
    best = None
    for cols in itertools.permutations(range(n), k):
        total = 0.0
        for i, j in enumerate(cols):
            total += float(costs[i, j])
        key = (total, cols)
        if best_key is None or key < best_key:
            best_key, best = key, cols
    return _make_assignment(costs, best)
