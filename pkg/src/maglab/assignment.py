"""Exact square assignment by a polynomial solver, with a factorial oracle for checking.

All solvers share one tie policy. Permutations whose total cost lies within
``tie_epsilon(best)`` of the optimum are treated as tied, the result is flagged
``degenerate`` and the lexicographically smallest tied permutation is returned.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import AnchorSet, GeometryError, as_configuration, as_permutation, cost_matrix

BRUTE_FORCE_MAX_N = 9


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AssignmentResult:
    sigma: np.ndarray
    cost: float
    gap: float
    degenerate: bool


def tie_epsilon(total_cost: float) -> float:
    return 1e-9 * (1.0 + abs(total_cost))


def _check_matrix(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
        raise AssignmentError(f"cost matrix must be square and non-empty, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise AssignmentError("cost matrix has non-finite entries")
    return c


def assignment_cost(cost: np.ndarray, sigma) -> float:
    """Total cost of ``sigma``; every solver reports its cost through this function."""
    sigma = np.asarray(sigma)
    return float(cost[np.arange(sigma.size), sigma].sum())


def _lsa(c: np.ndarray) -> tuple[np.ndarray, float]:
    rows, cols = linear_sum_assignment(c)
    # rows come back sorted, so cols is the row -> column map
    return cols, float(c[rows, cols].sum())


def _second_best(c: np.ndarray, sigma: np.ndarray) -> float:
    """Cost of the best permutation different from ``sigma``.

    Any other permutation avoids at least one edge of ``sigma``, so the
    minimum over the n single-edge exclusions is exact.
    """
    n = c.shape[0]
    if n == 1:
        return np.inf
    best = np.inf
    for a in range(n):
        m = c.copy()
        m[a, sigma[a]] = np.inf
        _, val = _lsa(m)
        best = min(best, val)
    return best


def _min_completion(c: np.ndarray, rows: list[int], cols: list[int]) -> float:
    if not rows:
        return 0.0
    return _lsa(c[np.ix_(rows, cols)])[1]


def _lexicographic_tie_break(c: np.ndarray, target: float) -> np.ndarray:
    """Smallest permutation in lexicographic order with total cost <= target."""
    n = c.shape[0]
    free_cols = list(range(n))
    sigma = np.empty(n, dtype=np.intp)
    prefix = 0.0
    for a in range(n):
        rest_rows = list(range(a + 1, n))
        for b in free_cols:
            cols = [j for j in free_cols if j != b]
            if prefix + c[a, b] + _min_completion(c, rest_rows, cols) <= target:
                sigma[a] = b
                prefix += c[a, b]
                free_cols = cols
                break
        else:  # pragma: no cover - the optimum itself always qualifies
            raise AssignmentError("tie-break failed to find a feasible column")
    return sigma


def solve(cost, with_gap: bool = True) -> AssignmentResult:
    """Global minimiser of ``sum_a cost[a, sigma[a]]`` over all permutations.

    Uses a shortest-augmenting-path (Hungarian class, O(N^3)) solver. The gap to
    the second-best permutation is computed exactly by single-edge exclusion
    (N extra solves); pass ``with_gap=False`` to skip it in hot loops, in which
    case ``gap`` is NaN, ``degenerate`` is False and no tie-break is applied.
    """
    c = _check_matrix(cost)
    sigma, best = _lsa(c)
    if not with_gap:
        return AssignmentResult(as_permutation(sigma), assignment_cost(c, sigma), np.nan, False)
    gap = _second_best(c, sigma) - best
    gap = max(gap, 0.0)
    degenerate = bool(gap <= tie_epsilon(best))
    if degenerate:
        sigma = _lexicographic_tie_break(c, best + tie_epsilon(best))
    return AssignmentResult(as_permutation(sigma), assignment_cost(c, sigma), float(gap), degenerate)


@lru_cache(maxsize=None)
def all_permutations(n: int) -> np.ndarray:
    """All permutations of ``range(n)`` in lexicographic order, shape ``(n!, n)``."""
    if n > BRUTE_FORCE_MAX_N:
        raise AssignmentError(f"refusing to enumerate {n}! permutations (max N={BRUTE_FORCE_MAX_N})")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    perms.setflags(write=False)
    return perms


def all_costs(cost) -> np.ndarray:
    """Total cost of every permutation, aligned with :func:`all_permutations`."""
    c = np.asarray(cost, dtype=np.float64)
    perms = all_permutations(c.shape[0])
    return c[np.arange(c.shape[0]), perms].sum(axis=1)


def brute_force(cost) -> AssignmentResult:
    """Exhaustive minimum over all N! permutations (N <= 9)."""
    c = _check_matrix(cost)
    n = c.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise AssignmentError(f"brute force limited to N <= {BRUTE_FORCE_MAX_N}, got N={n}")
    totals = all_costs(c)
    best = float(totals.min())
    if n == 1:
        gap = np.inf
    else:
        two = np.partition(totals, 1)[:2]
        gap = float(two[1] - two[0])
    # first hit in lexicographic order
    idx = int(np.argmax(totals <= best + tie_epsilon(best)))
    sigma = all_permutations(n)[idx]
    return AssignmentResult(
        as_permutation(sigma), assignment_cost(c, sigma), gap, bool(gap <= tie_epsilon(best))
    )


def solve_1d(x, anchors: AnchorSet) -> AssignmentResult:
    """Monotone (sorted-order) pairing, optimal for quadratic cost on the line."""
    if anchors.d != 1:
        raise GeometryError(f"solve_1d needs d=1 anchors, got d={anchors.d}")
    x = as_configuration(x, anchors.n)
    if x.shape[1] != 1:
        raise GeometryError(f"solve_1d needs d=1 points, got d={x.shape[1]}")
    sigma = np.empty(anchors.n, dtype=np.intp)
    sigma[np.argsort(x[:, 0], kind="stable")] = np.argsort(anchors.points[:, 0], kind="stable")
    c = cost_matrix(x, anchors)
    best = assignment_cost(c, sigma)
    gap = max(_second_best(c, sigma) - best, 0.0)
    degenerate = bool(gap <= tie_epsilon(best))
    if degenerate:
        sigma = _lexicographic_tie_break(c, best + tie_epsilon(best))
    return AssignmentResult(as_permutation(sigma), assignment_cost(c, sigma), float(gap), degenerate)


def kbest(cost) -> Iterator[tuple[np.ndarray, float]]:
    """Yield permutations in non-decreasing total cost (Murty's partitioning).

    Each step costs O(N) solves of size N, so the first k items cost O(k N^4).
    """
    c = _check_matrix(cost)
    n = c.shape[0]

    def constrained(forced, forbidden):
        m = c.copy()
        for a, b in forbidden:
            m[a, b] = np.inf
        for a, b in forced:
            keep = m[a, b]
            m[a, :] = np.inf
            m[:, b] = np.inf
            m[a, b] = keep
        try:
            sigma, _ = _lsa(m)
        except ValueError:
            return None
        return sigma

    counter = itertools.count()
    sigma = _lsa(c)[0]
    heap = [(assignment_cost(c, sigma), tuple(sigma), next(counter), (), ())]
    while heap:
        val, sig, _, forced, forbidden = heapq.heappop(heap)
        sig = np.array(sig, dtype=np.intp)
        yield sig, val
        fixed_rows = {a for a, _ in forced}
        free_rows = [a for a in range(n) if a not in fixed_rows]
        extra: list[tuple[int, int]] = []
        for a in free_rows:
            sub_forbidden = forbidden + ((a, int(sig[a])),)
            sub_forced = forced + tuple(extra)
            cand = constrained(sub_forced, sub_forbidden)
            if cand is not None:
                heapq.heappush(
                    heap,
                    (assignment_cost(c, cand), tuple(cand), next(counter), sub_forced, sub_forbidden),
                )
            extra.append((a, int(sig[a])))
