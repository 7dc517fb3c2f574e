"""Brownian particle clouds with their relabelling-symmetric densities, and path actions.

Two vanishing-noise limits are realised numerically:

* independent Brownian particles ``X_t = s0 + eps B_t`` observed up to a
  relabelling at time ``t*``. The density is known in closed form; as the
  noise vanishes, conditioned paths straighten onto a line along which the
  start point stays the closest permuted-anchor tuple;
* the noisy gradient flow ``dX = (X - pi(X)) dtheta + eta dB`` and its
  Freidlin-Wentzell action, whose two-point minimisers obey ``X'' = X - pi(X)``.

Randomness comes from counter-based Philox streams. Each (seed, stream, block)
triple owns an independent generator, so ensembles do not depend on how blocks
are distributed across workers.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded
from scipy.special import gammaln, logsumexp

from . import assignment, potential
from .geometry import AnchorSet, as_configuration, as_permutation, cost_matrix, permute_anchors

BLOCK = 1024
PRUNE_EXPONENT = 60.0
UNPRUNED_MAX_N = 12

STREAM_CLOUD = 1
STREAM_BRIDGE = 2
STREAM_NOISY = 3


def block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    """Generator for one block of draws; independent of every other (stream, block)."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(block), int(stream)]))


def _map_blocks(fn, n_items: int, workers: int):
    """Apply ``fn(block, start, stop)`` to fixed-size blocks, results in block order."""
    bounds = [(b, s, min(s + BLOCK, n_items)) for b, s in enumerate(range(0, n_items, BLOCK))]
    if workers <= 1 or len(bounds) <= 1:
        return [fn(*args) for args in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda args: fn(*args), bounds))


@dataclass(frozen=True)
class PathSample:
    theta: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 3 or points.shape[0] != theta.shape[0]:
            raise ValueError(f"points must have shape (K, N, d) matching theta, got {points.shape}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "points", points)

    @property
    def step(self) -> float:
        """Uniform grid spacing; raises on a non-uniform grid."""
        dt = np.diff(self.theta)
        if dt.size == 0 or np.any(dt <= 0) or np.ptp(dt) > 1e-9 * abs(dt[0]):
            raise ValueError("path grid is not uniform and increasing")
        return float((self.theta[-1] - self.theta[0]) / (self.theta.size - 1))


@dataclass(frozen=True)
class CloudSpec:
    anchors: AnchorSet
    sigma0: np.ndarray
    epsilon: float
    t_star: float
    n_paths: int = 1000
    n_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sigma0", as_permutation(self.sigma0, self.anchors.n))
        if self.epsilon < 0 or self.t_star <= 0:
            raise ValueError("need epsilon >= 0 and t_star > 0")
        if self.n_paths < 1 or self.n_steps < 1:
            raise ValueError("need n_paths >= 1 and n_steps >= 1")

    @property
    def s0(self) -> np.ndarray:
        return permute_anchors(self.anchors, self.sigma0)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_star, self.n_steps + 1)


def sample_cloud(spec: CloudSpec, workers: int = 1) -> np.ndarray:
    """Brownian paths ``s0 + eps B_t`` on the cloud time grid, shape ``(n_paths, n_steps+1, N, d)``."""
    n, d = spec.anchors.n, spec.anchors.d
    dt = spec.t_star / spec.n_steps
    s0 = spec.s0

    def run(block, start, stop):
        rng = block_rng(spec.seed, STREAM_CLOUD, block)
        incr = rng.standard_normal((stop - start, spec.n_steps, n, d)) * (spec.epsilon * math.sqrt(dt))
        out = np.empty((stop - start, spec.n_steps + 1, n, d))
        out[:, 0] = s0
        out[:, 1:] = s0 + np.cumsum(incr, axis=1)
        return out

    return np.concatenate(_map_blocks(run, spec.n_paths, workers))


# -- permutation-symmetrised Gaussian ---------------------------------------

def _matching_costs(y, s0) -> np.ndarray:
    """``[a, b] = |s0(a) - y(b)|^2`` so that ``sum_a [a, sigma(a)] = |y o sigma - s0|^2``."""
    return cost_matrix(s0, y)


def enumerate_terms(costs: np.ndarray, scale: float, prune: bool | None = None,
                    max_terms: int = 200_000) -> tuple[np.ndarray, np.ndarray, float]:
    """Permutations and exponents ``-cost/scale`` entering a sum over relabellings.

    Returns ``(perms, exponents, dropped_bound)`` where ``dropped_bound`` bounds
    the omitted mass relative to the kept mass. Full enumeration is used for
    N <= 9 (or ``prune=False``); otherwise permutations are produced in order of
    increasing cost and terms more than ``PRUNE_EXPONENT`` below the leading
    exponent are dropped.
    """
    n = costs.shape[0]
    if prune is None:
        prune = n > assignment.BRUTE_FORCE_MAX_N
    if not prune:
        if n > UNPRUNED_MAX_N:
            raise ValueError(f"N={n} > {UNPRUNED_MAX_N} needs pruning enabled")
        if n <= assignment.BRUTE_FORCE_MAX_N:
            perms = assignment.all_permutations(n)
            return perms, -assignment.all_costs(costs) / scale, 0.0
        import itertools

        perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
        return perms, -costs[np.arange(n), perms].sum(axis=1) / scale, 0.0
    kept_perms, kept = [], []
    lead = None
    for sigma, c in assignment.kbest(costs):
        e = -c / scale
        if lead is None:
            lead = e
        elif lead - e > PRUNE_EXPONENT:
            break
        kept_perms.append(sigma)
        kept.append(e)
        if len(kept) > max_terms:
            raise ValueError(f"more than {max_terms} terms within the pruning window; raise max_terms")
    kept = np.array(kept)
    n_dropped = math.exp(gammaln(n + 1)) - len(kept)
    log_kept = logsumexp(kept - lead)
    dropped = max(n_dropped, 0.0) * math.exp(-PRUNE_EXPONENT - log_kept)
    return np.array(kept_perms), kept, dropped


@dataclass(frozen=True)
class DensityResult:
    density: float
    log_density: float
    n_terms: int
    dropped_mass_bound: float


def permuted_density(y, s0, eps_var: float, anchors: AnchorSet, prune: bool | None = None) -> DensityResult:
    """``(1/N!) sum_sigma exp(-|y o sigma - s0|^2 / (2 v)) (2 pi v)^(-Nd/2)`` with ``v = eps_var``."""
    if eps_var <= 0:
        raise ValueError("eps_var must be positive")
    y = as_configuration(y, anchors.n, anchors.d)
    s0 = as_configuration(s0, anchors.n, anchors.d)
    n, d = y.shape
    perms, expo, dropped = enumerate_terms(_matching_costs(y, s0), 2.0 * eps_var, prune)
    log_p = float(logsumexp(expo) - gammaln(n + 1) - 0.5 * n * d * math.log(2 * math.pi * eps_var))
    return DensityResult(math.exp(log_p), log_p, len(expo), dropped)


def optimal_relabelling(y, s0) -> assignment.AssignmentResult:
    """``sigma*`` minimising ``|y o sigma - s0|``."""
    return assignment.solve(_matching_costs(y, s0))


def rate_function(y, s0, t_star: float, anchors: AnchorSet) -> float:
    """``min_sigma |y o sigma - s0|^2 / (2 t*)``."""
    if t_star <= 0:
        raise ValueError("t_star must be positive")
    y = as_configuration(y, anchors.n, anchors.d)
    s0 = as_configuration(s0, anchors.n, anchors.d)
    return optimal_relabelling(y, s0).cost / (2.0 * t_star)


@dataclass
class RateTable:
    epsilon: np.ndarray
    minus_eps_log_p: np.ndarray
    rate_limit: np.ndarray
    gap: np.ndarray
    correction: np.ndarray = field(default=None)
    checks: dict = field(default_factory=dict)

    @property
    def residual(self) -> np.ndarray:
        return self.gap - self.correction

    @property
    def ok(self) -> bool:
        return bool(self.checks) and all(self.checks.values())


def gaussian_correction(eps: float, n: int, d: int, t_star: float) -> float:
    """Laplace-method correction ``eps ((Nd/2) log(2 pi eps t*) + log N!)`` to ``-eps log p``."""
    return eps * (0.5 * n * d * math.log(2 * math.pi * eps * t_star) + float(gammaln(n + 1)))


def verify_rate_limit(y, s0, anchors: AnchorSet, t_star: float, eps_grid) -> RateTable:
    """Tabulate ``-eps log p`` against the rate limit over a decreasing noise grid.

    The density uses variance ``eps * t*``. Checks: ``|gap|`` strictly decreasing
    over the last three rows; the residual after removing the Gaussian
    correction non-increasing there; the correction explains the gap to 10% at
    the smallest ``eps``.
    """
    eps_grid = np.asarray(eps_grid, dtype=np.float64)
    if np.any(eps_grid <= 0) or np.any(np.diff(eps_grid) >= 0):
        raise ValueError("eps_grid must be positive and strictly decreasing")
    n, d = anchors.n, anchors.d
    rate = rate_function(y, s0, t_star, anchors)
    mlp = np.array([-e * permuted_density(y, s0, e * t_star, anchors).log_density for e in eps_grid])
    gap = mlp - rate
    corr = np.array([gaussian_correction(e, n, d, t_star) for e in eps_grid])
    table = RateTable(eps_grid, mlp, np.full_like(eps_grid, rate), gap, corr)
    tail_gap = np.abs(gap[-3:])
    tail_res = np.abs(table.residual[-3:])
    table.checks = {
        "gap_monotone": bool(gap.size >= 3 and np.all(np.diff(tail_gap) < 0)),
        "residual_monotone": bool(gap.size >= 3 and np.all(np.diff(tail_res) <= 1e-13)),
        "correction_explains_gap": bool(abs(table.residual[-1]) <= 0.1 * abs(corr[-1])),
    }
    return table


# -- geodesic limit ----------------------------------------------------------

def geodesic(y, s0, anchors: AnchorSet, t_star: float, n_steps: int = 100) -> tuple[PathSample, np.ndarray]:
    """Straight line ``s0 + (t/t*)(y o sigma* - s0)`` on a uniform grid, and ``sigma*``."""
    if t_star <= 0:
        raise ValueError("t_star must be positive")
    y = as_configuration(y, anchors.n, anchors.d)
    s0 = as_configuration(s0, anchors.n, anchors.d)
    sigma = optimal_relabelling(y, s0).sigma
    t = np.linspace(0.0, t_star, n_steps + 1)
    velocity = (y[sigma] - s0) / t_star
    return PathSample(t, s0[None] + t[:, None, None] * velocity[None]), sigma


@dataclass(frozen=True)
class GeodesicProjectionReport:
    grid: int
    projection_failures: int
    min_kappa: float
    kappa_violations: int
    gf0_residual: float

    @property
    def ok(self) -> bool:
        return self.projection_failures == 0 and self.kappa_violations == 0 and self.gf0_residual <= 1e-10


def check_geodesic_projection(y, sigma0, anchors: AnchorSet, t_star: float, grid: int = 50,
                       kappa_tol: float = 1e-12) -> GeodesicProjectionReport:
    """Along the geodesic from ``s0 = A o sigma0`` towards the best relabelling of ``y``,
    verify that ``s0`` stays the projection, that ``kappa(sigma) = |X_t - s0 o sigma|^2
    - |X_t - s0|^2 >= 0`` for every ``sigma`` (all of them when N <= 9), and that the
    line satisfies ``t X' = X - pi(X)`` at interior grid points.
    """
    sigma0 = as_permutation(sigma0, anchors.n)
    s0 = permute_anchors(anchors, sigma0)
    path, _ = geodesic(y, s0, anchors, t_star, grid - 1)
    n = anchors.n
    identity = np.arange(n)
    failures, violations = 0, 0
    min_kappa = np.inf
    projections = np.empty_like(path.points)
    for k, x in enumerate(path.points):
        res = assignment.solve(cost_matrix(x, anchors))
        projections[k] = anchors.points[res.sigma]
        if not np.array_equal(res.sigma, sigma0):
            c = cost_matrix(x, anchors)
            tied = res.degenerate and assignment.assignment_cost(c, sigma0) <= res.cost + assignment.tie_epsilon(res.cost)
            failures += not tied
        c0 = cost_matrix(x, s0)
        base = assignment.assignment_cost(c0, identity)
        if n <= assignment.BRUTE_FORCE_MAX_N:
            kappa = assignment.all_costs(c0) - base
        else:
            kappa = np.array([assignment.solve(c0).cost - base])
        min_kappa = min(min_kappa, float(kappa.min()))
        violations += int(np.sum(kappa < -kappa_tol))
    t = path.theta
    v = (path.points[2:] - path.points[:-2]) / (t[2:] - t[:-2])[:, None, None]
    lhs = t[1:-1, None, None] * v
    rhs = path.points[1:-1] - projections[1:-1]
    resid = float(np.max(np.abs(lhs - rhs))) if grid > 2 else 0.0
    return GeodesicProjectionReport(grid, failures, min_kappa, violations, resid)


@dataclass
class BridgeStats:
    times: np.ndarray
    mean_path: np.ndarray
    sigma_star: np.ndarray
    perms: np.ndarray
    posterior: np.ndarray
    mass_on_star: float
    geodesic: PathSample
    sup_distance: float
    counts: np.ndarray


def sample_conditioned_bridges(spec: CloudSpec, y, n_bridges: int, workers: int = 1) -> BridgeStats:
    """Brownian paths conditioned to end at some relabelling of ``y``.

    Two stages, both exact: draw ``sigma`` from the posterior
    ``prop. to exp(-|y o sigma - s0|^2 / (2 eps^2 t*))``, then a Brownian bridge of
    amplitude ``eps`` from ``s0`` to ``y o sigma``. Only the ensemble mean is kept.
    """
    anchors = spec.anchors
    y = as_configuration(y, anchors.n, anchors.d)
    s0 = spec.s0
    n, d = y.shape
    t = spec.times
    costs = _matching_costs(y, s0)
    if spec.epsilon == 0:
        best = assignment.solve(costs)
        perms, logw = best.sigma[None], np.zeros(1)
    else:
        perms, expo, _ = enumerate_terms(costs, 2.0 * spec.epsilon**2 * spec.t_star)
        logw = expo - logsumexp(expo)
    weights = np.exp(logw)
    weights /= weights.sum()
    cdf = np.cumsum(weights)
    sigma_star = optimal_relabelling(y, s0).sigma
    star_idx = np.flatnonzero(np.all(perms == sigma_star, axis=1))
    mass = float(weights[star_idx].sum()) if star_idx.size else 0.0
    frac = (t / spec.t_star)[None, :, None, None]
    dt = spec.t_star / spec.n_steps

    def run(block, start, stop):
        rng = block_rng(spec.seed, STREAM_BRIDGE, block)
        m = stop - start
        idx = np.minimum(np.searchsorted(cdf, rng.random(m), side="right"), len(cdf) - 1)
        ends = y[perms[idx]]                                   # (m, N, d)
        w = np.zeros((m, spec.n_steps + 1, n, d))
        w[:, 1:] = np.cumsum(rng.standard_normal((m, spec.n_steps, n, d)) * math.sqrt(dt), axis=1)
        bridge = w - frac * w[:, -1:]
        paths = s0 + frac * (ends - s0)[:, None] + spec.epsilon * bridge
        return paths.sum(axis=0), np.bincount(idx, minlength=len(perms))

    parts = _map_blocks(run, n_bridges, workers)
    total = np.zeros((spec.n_steps + 1, n, d))
    counts = np.zeros(len(perms), dtype=np.int64)
    for s, c in parts:
        total += s
        counts += c
    mean = total / n_bridges
    geo, _ = geodesic(y, s0, anchors, spec.t_star, spec.n_steps)
    sup = float(np.max(np.sqrt(np.sum((mean - geo.points) ** 2, axis=(1, 2)))))
    return BridgeStats(t, mean, sigma_star, perms, weights, mass, geo, sup, counts)


# -- noisy gradient flow and actions -----------------------------------------

def noisy_gradient_flow(x0, anchors: AnchorSet, eta: float, h: float, steps: int, seed: int = 0,
                        path_index: int = 0) -> PathSample:
    """Euler-Maruyama for ``dX = (X - pi(X)) dtheta + eta dB``; ``path_index`` selects the stream block."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(as_configuration(x0, anchors.n, anchors.d))
    rng = block_rng(seed, STREAM_NOISY, path_index)
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    amp = eta * math.sqrt(h)
    for k in range(steps):
        s = potential.evaluate(x, anchors).pi_point
        x = x + h * (x - s)
        if eta:
            x = x + amp * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at step {k + 1}")
        out[k + 1] = x
    return PathSample(h * np.arange(steps + 1), out)


def _potential_along(points, anchors, with_gap=False):
    evals = [potential.evaluate(x, anchors, with_gap=with_gap) for x in points]
    return np.array([e.phi for e in evals]), np.stack([e.grad for e in evals]), evals


@dataclass(frozen=True)
class ActionValues:
    fw: float
    classical: float
    discrepancy: float


def action(path: PathSample, anchors: AnchorSet) -> ActionValues:
    """Freidlin-Wentzell and classical actions of a sampled path.

    ``fw`` is the trapezoidal rule for ``|X' - grad phi|^2 / 2`` with node
    velocities (second-order finite differences). ``classical`` is the discrete
    Lagrangian sum ``h [|X_{k+1} - X_k|^2 / (2h^2) + (phi_k + phi_{k+1}) / 2]``.
    ``discrepancy = fw - (classical - phi(end) + phi(start))``.
    """
    if path.theta.size < 3:
        raise ValueError("action needs at least 3 nodes")
    h = path.step
    x = path.points
    phi, grad, _ = _potential_along(x, anchors)
    # differencing relative to the start keeps a constant path exactly at rest
    vel = np.gradient(x - x[0], h, axis=0, edge_order=2)
    w = np.full(x.shape[0], h)
    w[[0, -1]] = 0.5 * h
    fw = float(np.sum(w * 0.5 * np.sum((vel - grad) ** 2, axis=(1, 2))))
    classical = _classical(x, phi, h)
    return ActionValues(fw, classical, fw - (classical - phi[-1] + phi[0]))


def _classical(x, phi, h) -> float:
    dx = np.diff(x, axis=0)
    return float(np.sum(0.5 * np.sum(dx**2, axis=(1, 2)) / h + 0.5 * h * (phi[:-1] + phi[1:])))


@dataclass(frozen=True)
class ActionProblem:
    theta0: float
    theta1: float
    y0: np.ndarray
    y1: np.ndarray
    M: int = 256
    path: PathSample | None = None

    def __post_init__(self):
        if self.theta1 <= self.theta0:
            raise ValueError("need theta1 > theta0")
        y0 = as_configuration(self.y0)
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "y1", as_configuration(self.y1, *y0.shape))

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.theta0, self.theta1, self.M + 2)


@dataclass(frozen=True)
class MinimizeReport:
    converged: bool
    iterations: int
    residual: float
    action: float
    degenerate_nodes: int


def euler_lagrange_residual(points: np.ndarray, h: float, grad: np.ndarray) -> float:
    """``max_k |(X_{k+1} - 2 X_k + X_{k-1}) / h^2 - (X_k - pi(X_k))|`` over interior nodes."""
    acc = (points[2:] - 2 * points[1:-1] + points[:-2]) / h**2
    return float(np.max(np.linalg.norm(acc - grad[1:-1], axis=-1))) if points.shape[0] > 2 else 0.0


def minimize_action(problem: ActionProblem, anchors: AnchorSet, max_iters: int = 200,
                    tol: float = 1e-6) -> tuple[PathSample, MinimizeReport]:
    """Minimise the discrete classical action over interior nodes with endpoints pinned.

    Descent direction is the gradient preconditioned by the fixed tridiagonal
    metric ``L/h + h I`` (``L`` the discrete Laplacian), with Armijo backtracking.
    Converged when the discrete Euler-Lagrange residual is below ``tol (1 + R)``.
    """
    if problem.M < 8:
        raise ValueError("need at least 8 interior nodes")
    theta = problem.grid
    h = (problem.theta1 - problem.theta0) / (problem.M + 1)
    if problem.path is not None:
        x = np.array(problem.path.points, dtype=np.float64)
    else:
        frac = np.linspace(0.0, 1.0, problem.M + 2)[:, None, None]
        x = problem.y0[None] + frac * (problem.y1 - problem.y0)[None]
    x[0], x[-1] = problem.y0, problem.y1
    m = problem.M
    # upper banded form of L/h + h I
    ab = np.empty((2, m))
    ab[0, :] = -1.0 / h
    ab[0, 0] = 0.0
    ab[1, :] = 2.0 / h + h
    target = tol * (1.0 + anchors.radius)

    def evaluate(pts):
        phi, grad, _ = _potential_along(pts, anchors)
        return _classical(pts, phi, h), phi, grad

    S, phi, grad = evaluate(x)
    resid = euler_lagrange_residual(x, h, grad)
    it = 0
    while resid > target and it < max_iters:
        it += 1
        g = (2 * x[1:-1] - x[:-2] - x[2:]) / h + h * grad[1:-1]
        p = -solveh_banded(ab, g.reshape(m, -1)).reshape(g.shape)
        slope = float(np.sum(g * p))
        if slope >= 0:
            break
        alpha = 1.0
        while True:
            trial = x.copy()
            trial[1:-1] += alpha * p
            S_new, phi_new, grad_new = evaluate(trial)
            if S_new <= S + 1e-4 * alpha * slope or alpha < 1e-12:
                break
            alpha *= 0.5
        if alpha < 1e-12:
            break
        x, S, phi, grad = trial, S_new, phi_new, grad_new
        resid = euler_lagrange_residual(x, h, grad)
    _, _, evals = _potential_along(x[1:-1], anchors, with_gap=True)
    degenerate = sum(e.degenerate for e in evals)
    return PathSample(theta, x), MinimizeReport(resid <= target, it, resid, S, degenerate)
