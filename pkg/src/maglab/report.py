"""Figures for experiment runs, rendered off-screen to PNG.

Metadata that would vary between runs (software version stamp) is stripped so
identical data gives identical files.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_trajectory(traj, anchors, path) -> Path:
    """Particle paths in the first two coordinates (first coordinate against theta when d = 1)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = traj.position
        if x.shape[2] == 1:
            for a in range(x.shape[1]):
                ax.plot(traj.theta, x[:, a, 0], label=f"particle {a}")
            for p in anchors.points[:, 0]:
                ax.axhline(p, color="k", lw=0.5, ls=":")
            ax.set_xlabel("theta")
            ax.set_ylabel("x")
        else:
            for a in range(x.shape[1]):
                ax.plot(x[:, a, 0], x[:, a, 1], label=f"particle {a}")
                ax.plot(x[0, a, 0], x[0, a, 1], "o", color=ax.lines[-1].get_color(), ms=3)
            ax.plot(anchors.points[:, 0], anchors.points[:, 1], "k+", ms=8, label="anchors")
            ax.set_xlabel("x_1")
            ax.set_ylabel("x_2")
            ax.set_aspect("equal", adjustable="datalim")
        if x.shape[1] <= 8:
            ax.legend(loc="best")
        return _save(fig, path)


def plot_energy(traj, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(traj.theta, traj.energy - traj.energy[0], "k-")
        for k in traj.switch_indices():
            ax.axvline(traj.theta[k], color="tab:red", lw=0.5, alpha=0.5)
        ax.set_xlabel("theta")
        ax.set_ylabel("E - E(0)")
        ax.set_title(f"{traj.scheme.value}, h = {traj.h:g}")
        return _save(fig, path)


def plot_potential(traj, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.semilogy(traj.theta, np.maximum(traj.phi, 1e-300), "k-")
        ax.set_xlabel("theta")
        ax.set_ylabel("phi")
        return _save(fig, path)


def plot_rate_table(table, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.loglog(table.epsilon, np.abs(table.gap), "ko-", label="|-eps log p - rate|")
        ax.loglog(table.epsilon, np.abs(table.correction), "b--", label="Gaussian correction")
        res = np.abs(table.residual)
        shown = res > 0
        if shown.any():
            ax.loglog(table.epsilon[shown], res[shown], "r^:", label="residual")
        ax.set_xlabel("epsilon")
        ax.legend(loc="best")
        ax.invert_xaxis()
        return _save(fig, path)


def plot_bridges(stats, path) -> Path:
    """Ensemble mean against the straight line, first coordinate of each particle."""
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, sharex=True)
        for a in range(stats.mean_path.shape[1]):
            line, = top.plot(stats.times, stats.mean_path[:, a, 0])
            top.plot(stats.times, stats.geodesic.points[:, a, 0], ":", color=line.get_color())
        top.set_ylabel("x_1 (mean, line dotted)")
        dist = np.sqrt(np.sum((stats.mean_path - stats.geodesic.points) ** 2, axis=(1, 2)))
        bottom.plot(stats.times, dist, "k-")
        bottom.set_xlabel("t")
        bottom.set_ylabel("distance to line")
        return _save(fig, path)


def plot_action_path(path_sample, path, reference=None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        pts = path_sample.points
        for a in range(pts.shape[1]):
            line, = ax.plot(path_sample.theta, pts[:, a, 0], label=f"particle {a}")
            if reference is not None:
                ax.plot(reference.theta, reference.points[:, a, 0], ":", color=line.get_color())
        ax.set_xlabel("theta")
        ax.set_ylabel("x_1")
        if pts.shape[1] <= 8:
            ax.legend(loc="best")
        return _save(fig, path)


def plot_checks(results, path) -> Path:
    """Measured value over threshold for each check (bars above 1 failed)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        keys = [r.key for r in results]
        ratio = [r.value / r.threshold if r.threshold else (0.0 if r.value == 0 else np.inf) for r in results]
        colors = ["tab:green" if r.passed else "tab:red" for r in results]
        ax.barh(keys, np.clip(np.maximum(ratio, 1e-16), 1e-16, 1e3), color=colors)
        ax.set_xscale("log")
        ax.axvline(1.0, color="k", lw=0.8)
        ax.set_xlabel("measured / threshold")
        ax.invert_yaxis()
        return _save(fig, path)
