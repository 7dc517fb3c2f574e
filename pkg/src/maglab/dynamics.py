"""Time integration of the discrete MAG system and its first-order gradient flow.

Second order, in rescaled time ``theta``::

    X'' = X - pi(X)            (pi = closest permuted-anchor tuple)

First order::

    X'  = X - pi(X)            (theta form)
    t X' = X - pi(X)           (t form, t = exp(theta), singular at t = 0)

Between assignment switches both systems are linear with closed-form
solutions, which the exact schemes exploit.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import assignment, potential
from .geometry import AnchorSet, PhaseState, as_configuration, cost_matrix

DEFAULT_H = 1e-3
DEFAULT_SWITCH_TOL = 1e-10
MAX_SWITCHES = 10**6
MAX_SWITCHES_PER_STEP = 10**3


class Scheme(str, enum.Enum):
    VERLET = "verlet"
    PIECEWISE_EXACT = "piecewise_exact"
    EULER_GRADIENT_FLOW = "euler_gradient_flow"
    EXACT_SEGMENT_GRADIENT_FLOW = "exact_segment_gradient_flow"

    @property
    def second_order(self) -> bool:
        return self in (Scheme.VERLET, Scheme.PIECEWISE_EXACT)


class DynamicsError(RuntimeError):
    """Integration failure; ``step`` is the index of the offending sample."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ChatteringError(DynamicsError):
    pass


@dataclass
class Trajectory:
    theta: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray
    energy: np.ndarray
    degenerate: np.ndarray
    h: float
    scheme: Scheme
    # energy jump at each located switch (piecewise-exact only)
    switch_thetas: list[float] = field(default_factory=list)
    switch_jumps: list[float] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.theta.shape[0]

    @property
    def time(self) -> np.ndarray:
        return np.exp(self.theta)

    def state(self, k: int) -> PhaseState:
        return PhaseState(self.position[k], self.velocity[k], self.theta[k])

    @property
    def final(self) -> PhaseState:
        return self.state(-1)

    def switch_indices(self) -> np.ndarray:
        """Sample indices ``k`` whose permutation differs from sample ``k-1``."""
        changed = np.any(self.sigma[1:] != self.sigma[:-1], axis=1)
        return np.flatnonzero(changed) + 1


class _Recorder:
    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, theta, x, v, sigma, phi, degenerate):
        energy = 0.5 * float(np.dot(v.ravel(), v.ravel())) - phi
        self.rows.append((float(theta), np.array(x), np.array(v), np.array(sigma), phi, energy, degenerate))

    def build(self, h, scheme, **extra) -> Trajectory:
        cols = list(zip(*self.rows))
        return Trajectory(
            theta=np.array(cols[0]),
            position=np.stack(cols[1]),
            velocity=np.stack(cols[2]),
            sigma=np.stack(cols[3]).astype(np.intp),
            phi=np.array(cols[4]),
            energy=np.array(cols[5]),
            degenerate=np.array(cols[6], dtype=bool),
            h=float(h),
            scheme=Scheme(scheme),
            **extra,
        )


def _force_evaluator(anchors: AnchorSet, solver: str) -> Callable[[np.ndarray], potential.PotentialEval]:
    if solver == "general":
        return lambda x: potential.evaluate(x, anchors)
    if solver == "sort":
        def evaluate_sorted(x):
            res = assignment.solve_1d(x, anchors)
            s = anchors.points[res.sigma]
            g = x - s
            return potential.PotentialEval(0.5 * float(np.dot(g.ravel(), g.ravel())), s, res.sigma, g,
                                           res.degenerate, res.gap)
        return evaluate_sorted
    raise ValueError(f"unknown solver {solver!r} (expected 'general' or 'sort')")


def _check_finite(x, v, step):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise DynamicsError("non-finite state encountered", step)


def _guarded(evaluate, x, step):
    try:
        return evaluate(x)
    except ValueError as exc:  # overflowing cost matrix or configuration
        raise DynamicsError(f"force evaluation failed: {exc}", step) from exc


def integrate_mag(initial: PhaseState, anchors: AnchorSet, h: float = DEFAULT_H, steps: int = 1000,
                  solver: str = "general") -> Trajectory:
    """Velocity-Verlet for ``X'' = X - pi(X)`` with one assignment solve per step.

    ``solver="sort"`` computes the projection by monotone pairing (d = 1 only).
    """
    if h <= 0 or steps < 1:
        raise ValueError("need h > 0 and steps >= 1")
    evaluate = _force_evaluator(anchors, solver)
    x = np.array(as_configuration(initial.position, anchors.n, anchors.d))
    v = np.array(initial.velocity, dtype=np.float64)
    theta0 = initial.theta
    ev = _guarded(evaluate, x, 0)
    rec = _Recorder()
    rec.add(theta0, x, v, ev.sigma, ev.phi, ev.degenerate)
    for k in range(1, steps + 1):
        v_half = v + 0.5 * h * ev.grad
        x = x + h * v_half
        _check_finite(x, v_half, k)
        ev = _guarded(evaluate, x, k)
        v = v_half + 0.5 * h * ev.grad
        _check_finite(x, v, k)
        rec.add(theta0 + k * h, x, v, ev.sigma, ev.phi, ev.degenerate)
    return rec.build(h, Scheme.VERLET)


class _Segment:
    """Closed-form solution of ``X'' = X - s`` from a given start state."""

    def __init__(self, theta, x, v, sigma, anchors: AnchorSet):
        self.theta = theta
        self.sigma = np.array(sigma)
        self.s = anchors.points[self.sigma]
        self.c = x - self.s
        self.v = v

    def at(self, theta):
        dt = theta - self.theta
        ch, sh = math.cosh(dt), math.sinh(dt)
        return self.s + self.c * ch + self.v * sh, self.c * sh + self.v * ch

    def excess(self, theta, anchors) -> tuple[float, assignment.AssignmentResult, np.ndarray, np.ndarray]:
        """Cost of the segment permutation minus the re-solved optimum at ``theta``."""
        x, v = self.at(theta)
        c = cost_matrix(x, anchors)
        best = assignment.solve(c, with_gap=False)
        return assignment.assignment_cost(c, self.sigma) - best.cost, best, x, v


def _switch_threshold(cost: float) -> float:
    # rounding-level floor: below this the incumbent is still optimal
    return 64 * np.finfo(float).eps * (1.0 + abs(cost))


def integrate_mag_piecewise_exact(initial: PhaseState, anchors: AnchorSet, theta_end: float,
                                  switch_tol: float = DEFAULT_SWITCH_TOL, h: float = DEFAULT_H) -> Trajectory:
    """Exact propagation between assignment switches, sampled every ``h``.

    Switches are bracketed on the sampling grid and located by bisection on the
    excess cost of the current permutation over a fresh re-solve, to a bracket
    width of ``switch_tol``. Every located switch is also recorded as a sample.
    """
    if theta_end <= initial.theta:
        raise ValueError("theta_end must exceed the initial theta")
    x0 = np.array(as_configuration(initial.position, anchors.n, anchors.d))
    v0 = np.array(initial.velocity, dtype=np.float64)
    ev = potential.evaluate(x0, anchors)
    seg = _Segment(initial.theta, x0, v0, ev.sigma, anchors)
    rec = _Recorder()
    rec.add(initial.theta, x0, v0, ev.sigma, ev.phi, ev.degenerate)
    n_grid = max(1, math.ceil((theta_end - initial.theta) / h - 1e-9))
    switch_thetas: list[float] = []
    switch_jumps: list[float] = []
    theta_prev = initial.theta
    for k in range(1, n_grid + 1):
        theta_next = theta_end if k == n_grid else initial.theta + k * h
        local = 0
        while True:
            excess, best, x, v = seg.excess(theta_next, anchors)
            if excess <= _switch_threshold(best.cost):
                break
            lo, hi = theta_prev, theta_next
            while hi - lo > switch_tol:
                mid = 0.5 * (lo + hi)
                exc_mid, best_mid, _, _ = seg.excess(mid, anchors)
                if exc_mid > _switch_threshold(best_mid.cost):
                    hi, best = mid, best_mid
                else:
                    lo = mid
            xs, vs = seg.at(hi)
            c = cost_matrix(xs, anchors)
            jump = 0.5 * (assignment.assignment_cost(c, seg.sigma) - assignment.assignment_cost(c, best.sigma))
            switch_thetas.append(hi)
            switch_jumps.append(abs(jump))
            local += 1
            if local > MAX_SWITCHES_PER_STEP:
                raise ChatteringError(f"more than {MAX_SWITCHES_PER_STEP} switches within one step", k)
            if len(switch_thetas) > MAX_SWITCHES:
                raise ChatteringError(f"more than {MAX_SWITCHES} switches", k)
            seg = _Segment(hi, xs, vs, best.sigma, anchors)
            theta_prev = hi
            if hi < theta_next:
                ev = potential.evaluate(xs, anchors)
                rec.add(hi, xs, vs, seg.sigma, 0.5 * float(np.sum((xs - seg.s) ** 2)), ev.degenerate)
        _check_finite(x, v, k)
        ev = potential.evaluate(x, anchors)
        rec.add(theta_next, x, v, seg.sigma, 0.5 * float(np.sum((x - seg.s) ** 2)), ev.degenerate)
        theta_prev = theta_next
    return rec.build(h, Scheme.PIECEWISE_EXACT, switch_thetas=switch_thetas, switch_jumps=switch_jumps)


def integrate_gradient_flow(initial_x, anchors: AnchorSet, h: float = DEFAULT_H, steps: int = 1000,
                            scheme: Scheme | str = Scheme.EXACT_SEGMENT_GRADIENT_FLOW,
                            theta0: float = 0.0) -> Trajectory:
    """``X' = X - pi(X)``, re-solving the assignment at the start of every step.

    The exact-segment update ``X <- s + (X - s) e^h`` solves the frozen-permutation
    ODE exactly; ``scheme="euler_gradient_flow"`` uses ``X <- X + h (X - s)``.
    The recorded velocity is the flow field ``X - pi(X)`` at each sample.
    """
    scheme = Scheme(scheme)
    if scheme.second_order:
        raise ValueError(f"{scheme.value} is not a gradient-flow scheme")
    if h <= 0 or steps < 1:
        raise ValueError("need h > 0 and steps >= 1")
    x = np.array(as_configuration(initial_x, anchors.n, anchors.d))
    growth = math.exp(h)
    rec = _Recorder()
    for k in range(steps + 1):
        ev = _guarded(lambda y: potential.evaluate(y, anchors), x, k)
        rec.add(theta0 + k * h, x, ev.grad, ev.sigma, ev.phi, ev.degenerate)
        if k == steps:
            break
        if scheme is Scheme.EULER_GRADIENT_FLOW:
            x = x + h * (x - ev.pi_point)
        else:
            x = ev.pi_point + (x - ev.pi_point) * growth
        _check_finite(x, x, k + 1)
    return rec.build(h, scheme)


def integrate_gf0(initial_x, anchors: AnchorSet, t0: float, t1: float, h: float = DEFAULT_H,
                  scheme: Scheme | str = Scheme.EXACT_SEGMENT_GRADIENT_FLOW) -> Trajectory:
    """``t X' = X - pi(X)`` on ``[t0, t1]`` via ``theta = ln t`` (geometric sample times).

    ``h`` is the step in ``theta``, shrunk so that the grid ends exactly at
    ``ln t1``. The returned velocity is ``dX/dt``.
    """
    if t0 <= 0:
        raise ValueError("t0 must be > 0: the t-form equation is singular at t = 0")
    if t1 <= t0:
        raise ValueError("need t1 > t0")
    span = math.log(t1) - math.log(t0)
    steps = max(1, math.ceil(span / h - 1e-9))
    traj = integrate_gradient_flow(initial_x, anchors, span / steps, steps, scheme, theta0=math.log(t0))
    traj.velocity = traj.velocity / traj.time[:, None, None]
    return traj


@dataclass(frozen=True)
class EnergyReport:
    initial: float
    max_drift: float
    drift_per_switch: list[float]
    switch_count: int


def energy_report(traj: Trajectory, until: float | None = None, since: float | None = None) -> EnergyReport:
    """Drift of ``E = |V|^2/2 - phi(X)``, optionally only over samples with ``since <= theta < until``.

    Drift is measured from the first retained sample.
    """
    if not traj.scheme.second_order:
        raise ValueError(f"energy report needs a second-order trajectory, got {traj.scheme.value}")
    keep = np.ones(traj.n_samples, dtype=bool)
    if until is not None:
        keep &= traj.theta < until
    if since is not None:
        keep &= traj.theta >= since
    if not keep.any():
        raise ValueError("no samples in the requested window")
    e = traj.energy[keep]
    drift = float(np.max(np.abs(e - e[0])))
    if traj.scheme is Scheme.PIECEWISE_EXACT:
        per_switch = list(traj.switch_jumps)
    else:
        per_switch = [float(abs(traj.energy[k] - traj.energy[k - 1])) for k in traj.switch_indices()]
    return EnergyReport(float(e[0]), drift, per_switch, len(per_switch))


def switch_free_windows(traj: Trajectory) -> list[tuple[float, float]]:
    """``(start, end)`` theta intervals between consecutive assignment changes."""
    edges = np.concatenate([[traj.theta[0]], traj.theta[traj.switch_indices()], [traj.theta[-1]]])
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def common_switch_free_window(*trajs: Trajectory, margin: float = 0.0) -> tuple[float, float] | None:
    """Longest interval free of switches in every trajectory, shrunk by ``margin`` at both ends."""
    best = None
    candidates = [(-np.inf, np.inf)]
    for tr in trajs:
        candidates = [(max(a, c), min(b, d)) for a, b in candidates for c, d in switch_free_windows(tr)]
        candidates = [(a, b) for a, b in candidates if b > a]
    for a, b in candidates:
        lo, hi = a + margin, b - margin
        if hi > lo and (best is None or hi - lo > best[1] - best[0]):
            best = (lo, hi)
    return best


def max_segment_drift(traj: Trajectory) -> float:
    """Largest energy drift inside a switch-free window, boundary samples excluded.

    Separates the integrator's own drift from the jumps caused by locating a
    switch only to within its tolerance.
    """
    worst = 0.0
    for lo, hi in switch_free_windows(traj):
        inside = (traj.theta > lo) & (traj.theta < hi)
        if inside.sum() >= 2:
            e = traj.energy[inside]
            worst = max(worst, float(np.max(np.abs(e - e[0]))))
    return worst


@dataclass(frozen=True)
class BoundReport:
    samples: int
    force_mismatches: int
    max_force_mismatch: float
    radius_violations: int
    growth_violations: int
    min_growth_margin: float

    @property
    def ok(self) -> bool:
        return self.force_mismatches == 0 and self.radius_violations == 0 and self.growth_violations == 0


def bound_monitor(traj: Trajectory, anchors: AnchorSet, force_tol: float = 1e-12) -> BoundReport:
    """Audit the acceleration bound and the exponential growth bound at every sample.

    Acceleration: ``|(X - pi(X)) - X| = |A(sigma(a))| <= R`` per particle, with
    the stored permutation cross-checked against a fresh evaluation (a stored
    permutation tied with the fresh one within the tie tolerance is accepted). Growth:
    ``|X(a)| + |V(a)| <= (|X_0(a)| + |V_0(a)| + R) * 2 * exp(theta - theta_0)``.
    """
    R = anchors.radius
    x, v = traj.position, traj.velocity
    stored_force = x - anchors.points[traj.sigma]
    mismatches, worst = 0, 0.0
    for k in range(traj.n_samples):
        fresh = potential.evaluate(x[k], anchors)
        err = float(np.max(np.abs(fresh.grad - stored_force[k])))
        if err > force_tol * (1.0 + np.max(np.abs(x[k]))):
            # on an assignment boundary any co-optimal permutation is a valid projection
            c = cost_matrix(x[k], anchors)
            excess = assignment.assignment_cost(c, traj.sigma[k]) - fresh.phi * 2.0
            if excess > assignment.tie_epsilon(2.0 * fresh.phi):
                mismatches += 1
                worst = max(worst, err)
    accel = np.linalg.norm(stored_force - x, axis=2)
    radius_violations = int(np.sum(accel > R * (1 + 1e-12) + 1e-15))
    size = np.linalg.norm(x, axis=2) + np.linalg.norm(v, axis=2)
    bound = (size[0] + R)[None, :] * 2.0 * np.exp(traj.theta - traj.theta[0])[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        margin = np.where(size > 0, bound / size, np.inf)
    return BoundReport(traj.n_samples, int(mismatches), worst, radius_violations,
                       int(np.sum(size > bound)), float(np.min(margin)))
