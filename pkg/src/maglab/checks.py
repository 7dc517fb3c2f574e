"""Deterministic verification suite run by ``maglab verify``.

Each check draws its instances from fixed seeds, compares against an
independent oracle and returns a :class:`CheckResult`. ``quick=True`` shrinks
instance counts for smoke runs; thresholds are unchanged.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import assignment, dynamics as dyn, potential, stochastic as st
from .geometry import AnchorSet, PhaseState, cost_matrix, permute_anchors


@dataclass
class CheckResult:
    key: str
    title: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    elapsed: float = field(default=0.0, compare=False)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-300) if a != b else 0.0


def _instances(seed: int, count: int, sizes, dims, box: float = 1.0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.choice(sizes))
        d = int(rng.choice(dims))
        A = AnchorSet(rng.uniform(-box, box, (n, d)))
        yield rng, A, rng.uniform(-box, box, (n, d))


def assignment_exactness(quick=False, workers=1) -> CheckResult:
    count = 100 if quick else 500
    worst = 0.0
    for _, A, x in _instances(101, count, range(2, 9), (1, 2, 3)):
        c = cost_matrix(x, A)
        worst = max(worst, _rel(assignment.solve(c).cost, assignment.brute_force(c).cost))
    return CheckResult("assignment", "solver cost equals brute force", worst <= 1e-12, worst, 1e-12,
                       f"{count} instances, N in 2..8, d in 1..3")


def sorting_optimality(quick=False, workers=1) -> CheckResult:
    count = 50 if quick else 200
    worst = 0.0
    for _, A, x in _instances(102, count, range(2, 9), (1,)):
        c = cost_matrix(x, A)
        worst = max(worst, _rel(assignment.solve_1d(x, A).cost, assignment.brute_force(c).cost))
    return CheckResult("sorting_1d", "monotone pairing is optimal on the line", worst <= 1e-12, worst, 1e-12,
                       f"{count} instances, d=1")


def eikonal_identity(quick=False, workers=1, step=1e-5) -> CheckResult:
    """``|grad phi|^2 / 2 = phi`` and central differences match the gradient.

    Points whose difference stencil crosses an assignment boundary are redrawn.
    """
    count = 100 if quick else 500
    rng = np.random.default_rng(103)
    worst_fd, worst_eik, done, redrawn = 0.0, 0.0, 0, 0
    while done < count:
        n, d = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        A = AnchorSet(rng.uniform(-1, 1, (n, d)))
        y = rng.uniform(-1.5, 1.5, (n, d))
        ev = potential.evaluate(y, A)
        if ev.degenerate or ev.gap <= 4 * step * (1 + np.abs(y).max()) * n * d:
            redrawn += 1
            continue
        g = ev.grad.ravel()
        worst_eik = max(worst_eik, _rel(0.5 * float(np.dot(g, g)), ev.phi))
        fd = potential.finite_difference_gradient(y, A, step)
        scale = max(float(np.abs(ev.grad).max()), 1e-300)
        worst_fd = max(worst_fd, float(np.abs(fd - ev.grad).max()) / scale)
        done += 1
    ok = worst_eik == 0.0 and worst_fd <= 1e-6
    return CheckResult("eikonal", "eikonal identity and finite-difference gradient", ok, worst_fd, 1e-6,
                       f"{count} points, eikonal error {worst_eik:.3g}, {redrawn} redrawn near boundaries")


def projection_along_geodesic(quick=False, workers=1) -> CheckResult:
    count = 100 if quick else 500
    failures, violations, worst_kappa, worst_gf = 0, 0, np.inf, 0.0
    for rng, A, _ in _instances(104, count, range(2, 8), (1, 2, 3)):
        y = rng.uniform(-2, 2, A.points.shape)
        rep = st.check_geodesic_projection(y, rng.permutation(A.n), A, float(rng.uniform(0.2, 3.0)), grid=50)
        failures += rep.projection_failures
        violations += rep.kappa_violations
        worst_kappa = min(worst_kappa, rep.min_kappa)
        worst_gf = max(worst_gf, rep.gf0_residual)
    ok = failures == 0 and violations == 0 and worst_gf <= 1e-10
    return CheckResult("projection", "start point stays the projection along the geodesic", ok,
                       float(failures + violations), 0.0,
                       f"{count} instances N<=7, grid 50, min kappa {worst_kappa:.3g}, t-form residual {worst_gf:.3g}")


def single_particle_cosh(quick=False, workers=1) -> CheckResult:
    origin = AnchorSet([[0.0]])
    start = PhaseState([[1.0]], [[0.0]])
    verlet = dyn.integrate_mag(start, origin, 1e-4, 10_000)
    exact = dyn.integrate_mag_piecewise_exact(start, origin, 1.0)
    ev = abs(verlet.position[-1, 0, 0] - math.cosh(1.0))
    ee = abs(exact.position[-1, 0, 0] - math.cosh(1.0))
    return CheckResult("cosh", "single particle reproduces cosh", ev <= 1e-6 and ee <= 1e-12, ev, 1e-6,
                       f"verlet error {ev:.3g}, piecewise-exact error {ee:.3g} (limit 1e-12)")


def _random_phase(rng, n=5, d=2, vscale=0.5):
    A = AnchorSet(rng.uniform(-1, 1, (n, d)))
    return A, PhaseState(rng.uniform(-1, 1, (n, d)), rng.uniform(-vscale, vscale, (n, d)))


def energy_conservation(quick=False, workers=1) -> CheckResult:
    count = 3 if quick else 10
    rng = np.random.default_rng(106)
    ratios, exact_drift, jumps = [], 0.0, 0.0
    for _ in range(count):
        A, state = _random_phase(rng)
        a = dyn.integrate_mag(state, A, 1e-2, 500)
        b = dyn.integrate_mag(state, A, 5e-3, 1000)
        lo, hi = dyn.common_switch_free_window(a, b, margin=0.02)
        ratios.append(dyn.energy_report(a, since=lo, until=hi).max_drift
                      / dyn.energy_report(b, since=lo, until=hi).max_drift)
        ex = dyn.integrate_mag_piecewise_exact(state, A, 5.0, h=1e-2)
        exact_drift = max(exact_drift, dyn.max_segment_drift(ex))
        jumps = max(jumps, max(ex.switch_jumps, default=0.0))
    ratios = np.array(ratios)
    ok = bool(np.all((ratios >= 3) & (ratios <= 5)) and exact_drift <= 1e-10)
    return CheckResult("energy", "verlet drift is second order, exact segments conserve energy", ok,
                       float(np.max(np.abs(ratios - 4))), 1.0,
                       f"{count} runs N=5 d=2 theta in [0,5], ratios {ratios.min():.3f}..{ratios.max():.3f}, "
                       f"piecewise drift within segments {exact_drift:.3g}, largest switch jump {jumps:.3g}")


def a_priori_bounds(quick=False, workers=1) -> CheckResult:
    count = 3 if quick else 12
    rng = np.random.default_rng(107)
    bad, margin, samples = 0, np.inf, 0
    for k in range(count):
        A, state = _random_phase(rng, n=int(rng.integers(2, 7)), d=int(rng.integers(1, 4)), vscale=1.0)
        if k % 2:
            tr = dyn.integrate_mag_piecewise_exact(state, A, 3.0, h=1e-2)
        else:
            tr = dyn.integrate_mag(state, A, 1e-2, 300)
        rep = dyn.bound_monitor(tr, A)
        bad += rep.force_mismatches + rep.radius_violations + rep.growth_violations
        margin = min(margin, rep.min_growth_margin)
        samples += rep.samples
    return CheckResult("bounds", "force, acceleration and growth bounds", bad == 0, float(bad), 0.0,
                       f"{count} runs, {samples} samples, smallest growth margin {margin:.3f}")


EPS_GRID = 10.0 ** -np.arange(1, 7)


def rate_limit(quick=False, workers=1) -> CheckResult:
    count = 5 if quick else 20
    failed, worst = [], 0.0
    for i, (rng, A, y) in enumerate(_instances(108, count, range(1, 6), (1, 2, 3))):
        s0 = permute_anchors(A, rng.permutation(A.n))
        table = st.verify_rate_limit(y, s0, A, float(rng.uniform(0.5, 2.0)), EPS_GRID)
        worst = max(worst, abs(table.residual[-1]) / abs(table.correction[-1]))
        if not table.ok:
            failed.append(i)
    return CheckResult("rate_limit", "Gaussian correction explains the gap to the rate", not failed, worst, 0.1,
                       f"{count} instances N<=5, eps 1e-1..1e-6, failing {failed}")


def bridge_collapse(quick=False, workers=1) -> CheckResult:
    count = 1 if quick else 3
    n_bridges = 2_000 if quick else 10_000
    eps = 1e-3
    rng = np.random.default_rng(109)
    worst, mass = 0.0, 1.0
    for k in range(count):
        n, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        A = AnchorSet(rng.uniform(-1, 1, (n, d)))
        t_star = float(rng.uniform(0.5, 2.0))
        spec = st.CloudSpec(A, rng.permutation(n), eps, t_star, n_steps=100, seed=1000 + k)
        stats = st.sample_conditioned_bridges(spec, rng.uniform(-1, 1, (n, d)), n_bridges, workers)
        worst = max(worst, stats.sup_distance / (3 * eps * math.sqrt(t_star)))
        mass = min(mass, stats.mass_on_star)
    ok = worst <= 1.0 and mass >= 1 - 1e-6
    return CheckResult("bridges", "conditioned bridges collapse onto the geodesic", ok, worst, 1.0,
                       f"{count} ensembles of {n_bridges}, eps={eps}, min posterior mass on best relabelling {mass:.12f}")


def _frozen_solution(state: PhaseState, s: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Closed form of ``X'' = X - s`` with fixed ``s``."""
    c, sh = np.cosh(theta)[:, None, None], np.sinh(theta)[:, None, None]
    return s + (state.position - s) * c + state.velocity * sh


def action_consistency(quick=False, workers=1) -> CheckResult:
    count = 2 if quick else 5
    M, span = 256, 0.5
    h = span / (M + 1)
    rng = np.random.default_rng(110)
    worst_shoot, worst_el, used = 0.0, 0.0, 0
    while used < count:
        A = AnchorSet(rng.uniform(-1, 1, (4, 2)))
        state = PhaseState(rng.uniform(-1, 1, (4, 2)), 0.3 * rng.normal(size=(4, 2)))
        shot = dyn.integrate_mag(state, A, h, M + 1)
        if np.any(shot.sigma != shot.sigma[0]) or np.any(shot.degenerate):
            continue
        used += 1
        problem = st.ActionProblem(0.0, float(shot.theta[-1]), state.position, shot.position[-1], M=M)
        path, rep = st.minimize_action(problem, A)
        exact = _frozen_solution(state, permute_anchors(A, shot.sigma[0]), path.theta)
        scale = float(np.abs(exact).max())
        worst_shoot = max(worst_shoot, float(np.abs(path.points - exact).max()) / (5 * h**2 * scale))
        worst_el = max(worst_el, rep.residual / (1e-6 * (1 + A.radius)))
        if not rep.converged:
            worst_el = max(worst_el, np.inf)
    orders = []
    for seed in (2, 9, 10):
        disc = []
        for hh in (1e-2, 5e-3, 2.5e-3, 1.25e-3):
            r = np.random.default_rng(seed)
            A = AnchorSet(r.uniform(-1, 1, (3, 2)))
            tr = dyn.integrate_gradient_flow(r.uniform(-1, 1, (3, 2)), A, hh, int(round(0.5 / hh)))
            disc.append(abs(st.action(st.PathSample(tr.theta, tr.position), A).discrepancy))
        orders.extend(np.log2(np.array(disc[:-1]) / np.array(disc[1:])))
    min_order = float(min(orders))
    ok = worst_shoot <= 1.0 and worst_el <= 1.0 and min_order >= 1.9
    return CheckResult("action", "action minimisers follow the second-order dynamics", ok, worst_shoot, 1.0,
                       f"{count} two-point problems M={M}, error/(5h^2 scale) {worst_shoot:.3g}, "
                       f"residual/tol {worst_el:.3g}, discrepancy order >= {min_order:.3f}")


def zeldovich_equivalence(quick=False, workers=1) -> CheckResult:
    count = 5 if quick else 20
    rng = np.random.default_rng(111)
    worst = 0.0
    for _ in range(count):
        n, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        A = AnchorSet(rng.uniform(-1, 1, (n, d)))
        x0 = rng.uniform(-1, 1, (n, d))
        t0 = float(rng.uniform(0.2, 1.0))
        t1 = t0 * float(rng.uniform(1.5, 4.0))
        h = 1e-3
        a = dyn.integrate_gf0(x0, A, t0, t1, h)
        steps = a.n_samples - 1
        b = dyn.integrate_gradient_flow(x0, A, (math.log(t1) - math.log(t0)) / steps, steps,
                                        theta0=math.log(t0))
        worst = max(worst, float(np.abs(a.position[-1] - b.position[-1]).max()))
        if np.all(a.sigma == a.sigma[0]):
            s = permute_anchors(A, a.sigma[0])
            worst = max(worst, float(np.abs(a.position[-1] - (s + (x0 - s) * (t1 / t0))).max()))
    return CheckResult("zeldovich", "t-form flow equals the theta-form flow", worst <= 1e-10, worst, 1e-10,
                       f"{count} instances, endpoint error against theta flow and closed form")


SUITE: dict[str, Callable[..., CheckResult]] = {
    "assignment": assignment_exactness,
    "sorting_1d": sorting_optimality,
    "eikonal": eikonal_identity,
    "projection": projection_along_geodesic,
    "cosh": single_particle_cosh,
    "energy": energy_conservation,
    "bounds": a_priori_bounds,
    "rate_limit": rate_limit,
    "bridges": bridge_collapse,
    "action": action_consistency,
    "zeldovich": zeldovich_equivalence,
}

RUNTIME_LIMITS = {"assignment": 30.0, "projection": 120.0, "rate_limit": 60.0}


def run_suite(quick: bool = False, workers: int = 1, only=None) -> list[CheckResult]:
    """Run the checks in a fixed order; ``only`` restricts to a subset of keys."""
    unknown = set(only or ()) - set(SUITE)
    if unknown:
        raise KeyError(f"unknown checks: {sorted(unknown)}")
    results = []
    for key, fn in SUITE.items():
        if only and key not in only:
            continue
        start = time.perf_counter()
        res = fn(quick=quick, workers=workers)
        res.elapsed = time.perf_counter() - start
        limit = RUNTIME_LIMITS.get(key)
        if limit is not None and res.elapsed > limit:
            res.passed = False
            res.detail += f"; runtime {res.elapsed:.1f}s over {limit:.0f}s"
        results.append(res)
    return results
