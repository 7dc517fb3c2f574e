"""Configurations in (R^d)^N and the permutations that relabel anchors.

A configuration is stored as a float64 array of shape ``(N, d)``; row ``a``
is the position of particle ``a``. Permutations are 0-based integer arrays
``sigma`` with ``sigma[a]`` the anchor assigned to particle ``a``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Malformed configuration, anchor set or permutation."""


def as_configuration(points, n: int | None = None, d: int | None = None) -> np.ndarray:
    """Validate and return ``points`` as a read-only ``(N, d)`` float64 array."""
    x = np.array(points, dtype=np.float64)
    if x.ndim == 1 and d in (None, 1):
        x = x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise GeometryError(f"configuration must have shape (N, d) with N, d >= 1, got {x.shape}")
    if n is not None and x.shape[0] != n:
        raise GeometryError(f"expected N={n} particles, got {x.shape[0]}")
    if d is not None and x.shape[1] != d:
        raise GeometryError(f"expected dimension d={d}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise GeometryError("configuration has non-finite components")
    x.setflags(write=False)
    return x


def as_permutation(mapping, n: int | None = None) -> np.ndarray:
    """Validate a 0-based permutation array; rejects repeated or out-of-range indices."""
    p = np.asarray(mapping)
    if p.ndim != 1 or p.size == 0:
        raise GeometryError("permutation must be a non-empty 1-D array")
    if not np.issubdtype(p.dtype, np.integer):
        if not np.all(p == np.round(p)):
            raise GeometryError("permutation entries must be integers")
    p = p.astype(np.intp)
    if n is not None and p.size != n:
        raise GeometryError(f"expected permutation of size {n}, got {p.size}")
    if not np.array_equal(np.sort(p), np.arange(p.size)):
        raise GeometryError(f"not a bijection of 0..{p.size - 1}: {p.tolist()}")
    p.setflags(write=False)
    return p


def identity(n: int) -> np.ndarray:
    return as_permutation(np.arange(n))


def compose(outer, inner) -> np.ndarray:
    """``(outer o inner)[a] = outer[inner[a]]``."""
    outer = np.asarray(outer)
    return as_permutation(outer[np.asarray(inner)])


def inverse(sigma) -> np.ndarray:
    sigma = np.asarray(sigma)
    inv = np.empty_like(sigma)
    inv[sigma] = np.arange(sigma.size)
    return as_permutation(inv)


@dataclass(frozen=True)
class AnchorSet:
    """N distinct reference points; ``radius`` is the largest anchor norm."""

    points: np.ndarray
    radius: float = field(init=False)

    def __post_init__(self):
        pts = as_configuration(self.points)
        object.__setattr__(self, "points", pts)
        radius = float(np.max(np.linalg.norm(pts, axis=1)))
        object.__setattr__(self, "radius", radius)
        if pts.shape[0] > 1:
            diff = pts[:, None, :] - pts[None, :, :]
            dist = np.sqrt(np.einsum("abk,abk->ab", diff, diff))
            np.fill_diagonal(dist, np.inf)
            if dist.min() <= 1e-12 * (1.0 + radius):
                i, j = np.unravel_index(np.argmin(dist), dist.shape)
                raise GeometryError(f"anchors {i} and {j} coincide (distance {dist[i, j]:.3e})")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def __eq__(self, other):
        return isinstance(other, AnchorSet) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())


@dataclass(frozen=True)
class PhaseState:
    position: np.ndarray
    velocity: np.ndarray
    theta: float = 0.0

    def __post_init__(self):
        x = as_configuration(self.position)
        v = as_configuration(self.velocity, *x.shape)
        object.__setattr__(self, "position", x)
        object.__setattr__(self, "velocity", v)
        object.__setattr__(self, "theta", float(self.theta))


def norm(x) -> float:
    """Flat Euclidean norm over all N*d components (no 1/N weight)."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.dot(x.ravel(), x.ravel())))


def inner(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise GeometryError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(np.dot(x.ravel(), y.ravel()))


def permute_anchors(anchors: AnchorSet, sigma) -> np.ndarray:
    """The element ``(A(sigma(0)), ..., A(sigma(N-1)))`` of the permuted-anchor set."""
    sigma = as_permutation(sigma, anchors.n)
    return anchors.points[sigma]


def cost_matrix(x, anchors) -> np.ndarray:
    """Entry ``[a, b] = |x(a) - anchors(b)|^2``.

    ``anchors`` may be an :class:`AnchorSet` or any ``(N, d)`` array (the
    stochastic module pairs two configurations this way).
    """
    x = np.asarray(x, dtype=np.float64)
    a = anchors.points if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    if x.shape != a.shape:
        raise GeometryError(f"dimension mismatch: {x.shape} vs {a.shape}")
    diff = x[:, None, :] - a[None, :, :]
    return np.einsum("abk,abk->ab", diff, diff)


def grid_anchors(n: int, d: int, spacing: float = 1.0) -> AnchorSet:
    """First ``n`` points of a centred cubic lattice, in lexicographic order."""
    side = int(np.ceil(n ** (1.0 / d) - 1e-9))
    axes = [np.arange(side) - (side - 1) / 2.0] * d
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    return AnchorSet(spacing * mesh[:n])


def random_anchors(n: int, d: int, rng: np.random.Generator, box: float = 1.0) -> AnchorSet:
    return AnchorSet(rng.uniform(-box, box, size=(n, d)))
