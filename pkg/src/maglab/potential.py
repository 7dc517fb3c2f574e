"""Squared-distance potential to the permuted-anchor set and its projection.

For a configuration ``Y`` let ``s = pi(Y)`` be the closest permuted-anchor
tuple. Then ``phi(Y) = |Y - s|^2 / 2``, ``grad phi(Y) = Y - s`` and the
convex support function ``Pi(Y) = |Y|^2 / 2 - phi(Y)`` has gradient ``s``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import assignment
from .geometry import AnchorSet, as_configuration, cost_matrix, inner, norm, permute_anchors


@dataclass(frozen=True)
class PotentialEval:
    phi: float
    pi_point: np.ndarray
    sigma: np.ndarray
    grad: np.ndarray
    degenerate: bool
    gap: float = np.nan


def evaluate(y, anchors: AnchorSet, with_gap: bool = True) -> PotentialEval:
    """Exact potential, projection and force ``Y - pi(Y)`` via one assignment solve."""
    y = as_configuration(y, anchors.n, anchors.d)
    res = assignment.solve(cost_matrix(y, anchors), with_gap=with_gap)
    s = permute_anchors(anchors, res.sigma)
    grad = y - s
    phi = 0.5 * float(np.dot(grad.ravel(), grad.ravel()))
    return PotentialEval(phi, s, res.sigma, grad, res.degenerate, res.gap)


def phi(y, anchors: AnchorSet) -> float:
    return evaluate(y, anchors, with_gap=False).phi


def force(y, anchors: AnchorSet) -> np.ndarray:
    return evaluate(y, anchors, with_gap=False).grad


def big_pi(y, anchors: AnchorSet) -> float:
    """``max_sigma ((Y, s_sigma)) - |s_sigma|^2 / 2``.

    Solved as its own assignment problem on the score ``-Y(a).A(b) + |A(b)|^2/2``
    so it is an independent route to ``|Y|^2/2 - phi``.
    """
    y = as_configuration(y, anchors.n, anchors.d)
    a = anchors.points
    score = -(y @ a.T) + 0.5 * np.einsum("bk,bk->b", a, a)[None, :]
    # constant shift keeps the solver's non-negativity precondition
    res = assignment.solve(score - score.min(), with_gap=False)
    s = permute_anchors(anchors, res.sigma)
    return inner(y, s) - 0.5 * norm(s) ** 2


def convexity_probe(y1, y2, anchors: AnchorSet, t: float, slack: float = 1e-10) -> bool:
    y1 = as_configuration(y1, anchors.n, anchors.d)
    y2 = as_configuration(y2, anchors.n, anchors.d)
    lhs = big_pi(t * y1 + (1.0 - t) * y2, anchors)
    rhs = t * big_pi(y1, anchors) + (1.0 - t) * big_pi(y2, anchors)
    return bool(lhs <= rhs + slack)


def finite_difference_gradient(y, anchors: AnchorSet, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``phi``; used as an independent check of ``grad``."""
    y = np.array(as_configuration(y, anchors.n, anchors.d))
    g = np.empty_like(y)
    for idx in np.ndindex(*y.shape):
        up = y.copy()
        dn = y.copy()
        up[idx] += step
        dn[idx] -= step
        g[idx] = (phi(up, anchors) - phi(dn, anchors)) / (2.0 * step)
    return g
