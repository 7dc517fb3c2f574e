"""Command-line front end.

    maglab run --config run.yaml [--out DIR] [--seed U64] [--threads N]
    maglab verify [--quick] [--out DIR] [--threads N] [--only KEY ...]
    maglab --version

Each run writes its tables (and PNG figures unless disabled) next to a
``manifest.json`` that lists every file with its SHA-256. Exit status: 0 all checks pass, 1 a check
failed, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION, __version__, checks, config as cfgmod, dynamics as dyn, io, stochastic as st
from .checks import CheckResult
from .geometry import GeometryError, PhaseState, permute_anchors

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

# separate streams so position, velocity and targets drawn from one seed are independent
STREAM_POSITION, STREAM_VELOCITY, STREAM_TARGET, STREAM_Y0, STREAM_Y1 = 1, 2, 3, 4, 5


class Run:
    """Output directory bookkeeping for one invocation."""

    def __init__(self, out: Path, figures: bool):
        self.out = out
        self.figures = figures
        self.files: list[Path] = []
        self.checks: list[CheckResult] = []
        self.summary: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    def figure(self, name: str, draw, *args, **kwargs):
        if self.figures:
            draw(*args, self.path(name), **kwargs)

    def check(self, key, title, passed, value, threshold, detail=""):
        self.checks.append(CheckResult(key, title, bool(passed), float(value), float(threshold), detail))


def _trajectory_summary(traj) -> dict:
    return {
        "samples": int(traj.n_samples),
        "theta_end": float(traj.theta[-1]),
        "phi_end": float(traj.phi[-1]),
        "switches": int(traj.switch_indices().size),
        "degenerate_samples": int(np.sum(traj.degenerate)),
    }


def run_mag(c: cfgmod.MagConfig, run: Run, workers: int):
    A = cfgmod.build_anchors(c.anchors, c.seed)
    x0 = cfgmod.build_points(c.position, A, c.seed, "position", STREAM_POSITION)
    v0 = (np.zeros_like(x0) if c.velocity is None
          else cfgmod.build_points(c.velocity, A, c.seed, "velocity", STREAM_VELOCITY))
    state = PhaseState(x0, v0)
    if c.scheme == "verlet":
        traj = dyn.integrate_mag(state, A, c.h, c.steps, solver=c.solver)
    else:
        theta_end = c.theta_end if c.theta_end is not None else c.h * c.steps
        traj = dyn.integrate_mag_piecewise_exact(state, A, theta_end, switch_tol=c.switch_tol, h=c.h)
    io.emit_trajectory(traj, run.path("trajectory.csv"))
    run.figure("trajectory.png", _plot("plot_trajectory"), traj, A)
    run.figure("energy.png", _plot("plot_energy"), traj)
    bounds = dyn.bound_monitor(traj, A)
    run.check("bounds", "force, acceleration and growth bounds", bounds.ok,
              bounds.force_mismatches + bounds.radius_violations + bounds.growth_violations, 0,
              f"smallest growth margin {bounds.min_growth_margin:.3f}")
    report = dyn.energy_report(traj)
    run.summary = _trajectory_summary(traj) | {"energy_drift": report.max_drift}
    if traj.scheme is dyn.Scheme.PIECEWISE_EXACT:
        drift = dyn.max_segment_drift(traj)
        run.check("energy_segments", "energy conserved between switches", drift <= 1e-10, drift, 1e-10)


def run_flow(c: cfgmod.FlowConfig, run: Run, workers: int):
    A = cfgmod.build_anchors(c.anchors, c.seed)
    x0 = cfgmod.build_points(c.position, A, c.seed, "position", STREAM_POSITION)
    traj = dyn.integrate_gradient_flow(x0, A, c.h, c.steps, scheme=c.scheme)
    _emit_flow(traj, A, run)
    # a frozen-permutation step keeps phi from decreasing; across a switch it loses at most a (1-c)^2 factor
    c_step = math.expm1(c.h) if c.scheme == "exact_segment_gradient_flow" else c.h
    same = np.all(traj.sigma[1:] == traj.sigma[:-1], axis=1)
    rise = np.diff(traj.phi)
    bad = int(np.sum(rise[same] < -1e-12 * traj.phi[1:][same]))
    bad += int(np.sum(traj.phi[1:] < (1 - c_step) ** 2 * traj.phi[:-1] * (1 - 1e-12)))
    run.check("phi_ascent", "phi grows along the flow", bad == 0, bad, 0)


def run_gf0(c: cfgmod.Gf0Config, run: Run, workers: int):
    A = cfgmod.build_anchors(c.anchors, c.seed)
    x0 = cfgmod.build_points(c.position, A, c.seed, "position", STREAM_POSITION)
    traj = dyn.integrate_gf0(x0, A, c.t0, c.t1, c.h, scheme=c.scheme)
    _emit_flow(traj, A, run)
    steps = traj.n_samples - 1
    ref = dyn.integrate_gradient_flow(x0, A, (math.log(c.t1) - math.log(c.t0)) / steps, steps,
                                      scheme=c.scheme, theta0=math.log(c.t0))
    err = float(np.max(np.abs(traj.position[-1] - ref.position[-1])))
    run.check("zeldovich", "t-form flow equals the theta-form flow", err <= 1e-10, err, 1e-10)
    run.summary["t_end"] = float(traj.time[-1])


def _emit_flow(traj, A, run: Run):
    io.emit_trajectory(traj, run.path("trajectory.csv"))
    run.figure("trajectory.png", _plot("plot_trajectory"), traj, A)
    run.figure("potential.png", _plot("plot_potential"), traj)
    run.summary = _trajectory_summary(traj)


def run_rate(c: cfgmod.RateConfig, run: Run, workers: int):
    A = cfgmod.build_anchors(c.anchors, c.seed)
    s0 = permute_anchors(A, cfgmod.build_permutation(c.sigma0, A))
    y = cfgmod.build_points(c.target, A, c.seed, "target", STREAM_TARGET)
    try:
        table = st.verify_rate_limit(y, s0, A, c.t_star, c.eps_grid)
    except ValueError as err:
        raise cfgmod.ConfigError(f"eps_grid: {err}") from None
    io.emit_rate_table(table, run.path("rate_table.csv"))
    run.figure("rate_table.png", _plot("plot_rate_table"), table)
    for key, ok in table.checks.items():
        run.check(key, key.replace("_", " "), ok, float(abs(table.residual[-1])), 0.1 * abs(table.correction[-1]))
    run.summary = {"rate": float(table.rate_limit[0]), "rows": int(table.epsilon.size)}


def run_bridge(c: cfgmod.BridgeConfig, run: Run, workers: int):
    A = cfgmod.build_anchors(c.anchors, c.seed)
    sigma0 = cfgmod.build_permutation(c.sigma0, A)
    y = cfgmod.build_points(c.target, A, c.seed, "target", STREAM_TARGET)
    if c.seed is None:
        raise cfgmod.ConfigError("seed: required for bridge sampling")
    spec = st.CloudSpec(A, sigma0, c.epsilon, c.t_star, n_steps=c.n_steps, seed=c.seed)
    stats = st.sample_conditioned_bridges(spec, y, c.n_bridges, workers)
    n, d = A.n, A.d
    header = (["t", "particle_index"] + [f"mean_x_{k + 1}" for k in range(d)]
              + [f"line_x_{k + 1}" for k in range(d)])
    rows = ([float(t), a, *map(float, stats.mean_path[i, a]), *map(float, stats.geodesic.points[i, a])]
            for i, t in enumerate(stats.times) for a in range(n))
    io.emit_rows(run.path("bridge_mean.csv"), header, rows)
    order = np.argsort(-stats.posterior, kind="stable")
    io.emit_rows(run.path("posterior.csv"), ["permutation", "weight", "count"],
                 ([" ".join(map(str, stats.perms[k])), float(stats.posterior[k]), int(stats.counts[k])]
                  for k in order))
    run.figure("bridges.png", _plot("plot_bridges"), stats)
    bound = 3 * c.epsilon * math.sqrt(c.t_star)
    run.check("bridge_line", "ensemble mean stays near the straight line", stats.sup_distance <= bound,
              stats.sup_distance, bound)
    run.check("posterior", "posterior mass on the best relabelling", stats.mass_on_star >= 1 - 1e-6,
              1 - stats.mass_on_star, 1e-6)
    run.summary = {"sigma_star": stats.sigma_star.tolist(), "sup_distance": stats.sup_distance}


def run_action(c: cfgmod.ActionConfig, run: Run, workers: int):
    A = cfgmod.build_anchors(c.anchors, c.seed)
    y0 = cfgmod.build_points(c.y0, A, c.seed, "y0", STREAM_Y0)
    shot = None
    if c.y1 is not None:
        y1 = cfgmod.build_points(c.y1, A, c.seed, "y1", STREAM_Y1)
    else:
        v0 = cfgmod.build_points(c.velocity, A, c.seed, "velocity", STREAM_VELOCITY)
        h = (c.theta1 - c.theta0) / (c.M + 1)
        traj = dyn.integrate_mag(PhaseState(y0, v0, c.theta0), A, h, c.M + 1)
        shot = st.PathSample(traj.theta, traj.position)
        y1 = traj.position[-1]
    problem = st.ActionProblem(c.theta0, c.theta1, y0, y1, M=c.M)
    path, rep = st.minimize_action(problem, A, max_iters=c.max_iters, tol=c.tol)
    values = st.action(path, A)
    d = A.d
    header = ["theta", "particle_index"] + [f"x_{k + 1}" for k in range(d)]
    if shot is not None:
        header += [f"shot_x_{k + 1}" for k in range(d)]
    rows = []
    for i, th in enumerate(path.theta):
        for a in range(A.n):
            row = [float(th), a, *map(float, path.points[i, a])]
            if shot is not None:
                row += list(map(float, shot.points[i, a]))
            rows.append(row)
    io.emit_rows(run.path("action_path.csv"), header, rows)
    run.figure("action_path.png", _plot("plot_action_path"), path, reference=shot)
    tol = c.tol * (1 + A.radius)
    run.check("euler_lagrange", "discrete Euler-Lagrange residual", rep.converged, rep.residual, tol,
              f"{rep.iterations} iterations, {rep.degenerate_nodes} degenerate nodes")
    if shot is not None:
        h = problem.grid[1] - problem.grid[0]
        err = float(np.max(np.abs(path.points - shot.points)))
        limit = 5 * h**2 * float(np.max(np.abs(shot.points)))
        run.check("shooting", "minimiser matches the shot trajectory", err <= limit, err, limit)
    run.summary = {"classical_action": values.classical, "fw_action": values.fw,
                   "discrepancy": values.discrepancy}


def run_verify(c: cfgmod.VerifyConfig, run: Run, workers: int):
    try:
        results = checks.run_suite(quick=c.quick, workers=workers, only=c.only)
    except KeyError as err:
        raise cfgmod.ConfigError(f"only: {err.args[0]}") from None
    run.checks.extend(results)
    io.emit_rows(run.path("checks.csv"), ["key", "passed", "value", "threshold", "detail"],
                 ([r.key, int(r.passed), float(r.value), float(r.threshold), r.detail] for r in results))
    run.figure("checks.png", _plot("plot_checks"), results)
    run.summary = {"quick": c.quick, "checks": len(results)}
    for r in results:
        print(f"  {r.key:12s} {'pass' if r.passed else 'FAIL'}  {r.elapsed:6.1f}s  {r.detail}", file=sys.stderr)


def _plot(name):
    # matplotlib is only imported when a figure is actually drawn
    def draw(*args, **kwargs):
        from . import report

        return getattr(report, name)(*args, **kwargs)
    return draw


RUNNERS = {
    "mag": run_mag,
    "zeldovich": run_flow,
    "gf0": run_gf0,
    "ldp-rate": run_rate,
    "ldp-bridge": run_bridge,
    "action": run_action,
    "verify": run_verify,
}


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    return value


def write_manifest(run: Run, cfg) -> Path:
    """Manifest of one run; carries no wall-clock so repeated runs hash identically."""
    entries = []
    for p in sorted(run.files):
        entries.append({"name": p.name, "sha256": io.sha256_file(p), "bytes": p.stat().st_size})
    manifest = {
        "artifact": "maglab",
        "version": __version__,
        "format": FORMAT_VERSION,
        "config": cfg.model_dump(mode="json", exclude={"out"}),
        "passed": all(r.passed for r in run.checks),
        "checks": [{k: v for k, v in asdict(r).items() if k != "elapsed"} for r in run.checks],
        "summary": run.summary,
        "files": entries,
    }
    path = run.out / "manifest.json"
    path.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def execute(cfg, out: Path, workers: int = 1) -> int:
    start = time.perf_counter()
    run = Run(out, cfg.figures)
    try:
        RUNNERS[cfg.kind](cfg, run, workers)
    except cfgmod.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (dyn.DynamicsError, GeometryError, ArithmeticError, ValueError, RuntimeError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = write_manifest(run, cfg)
    passed = all(r.passed for r in run.checks)
    status = "pass" if passed else "FAIL"
    print(f"{cfg.kind}: {status} ({len(run.checks)} checks, {len(run.files)} files) -> {manifest}")
    print(f"wall-clock {time.perf_counter() - start:.2f}s", file=sys.stderr)
    return EXIT_OK if passed else EXIT_CHECK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maglab", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version",
                   version=f"maglab {__version__} (output format {FORMAT_VERSION})")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a YAML config")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--out", type=Path)
    r.add_argument("--seed", type=int, help="override the top-level seed")
    r.add_argument("--threads", type=int, default=1)
    v = sub.add_parser("verify", help="run the verification suite")
    v.add_argument("--quick", action="store_true", help="fewer instances, same thresholds")
    v.add_argument("--out", type=Path, default=Path("maglab-verify"))
    v.add_argument("--threads", type=int, default=1)
    v.add_argument("--only", nargs="+", metavar="KEY", help=f"subset of: {', '.join(checks.SUITE)}")
    v.add_argument("--figures", action="store_true", help="also render checks.png")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads < 1:
        print("config error: threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "verify":
            cfg = cfgmod.parse({"kind": "verify", "quick": args.quick, "only": args.only,
                                "figures": args.figures})
            out = args.out
        else:
            cfg = cfgmod.load(args.config)
            if args.seed is not None:
                cfg = cfgmod.parse(cfg.model_dump() | {"seed": args.seed})
            out = args.out or Path(cfg.out or f"runs/{cfg.kind}")
    except cfgmod.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return execute(cfg, Path(out), args.threads)


if __name__ == "__main__":
    sys.exit(main())
