"""Delimited-text serialisation of trajectories and rate tables.

Comma separated, ``.`` decimal point, LF line endings, UTF-8, one header row.
Floats are written with 17 significant digits so every 64-bit value
round-trips exactly.
"""
from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np

from .dynamics import Scheme, Trajectory
from .stochastic import RateTable

RATE_COLUMNS = ["epsilon", "minus_eps_log_p", "rate_limit", "gap"]


def fmt(value: float) -> str:
    return format(float(value), ".17g")


def trajectory_columns(d: int) -> list[str]:
    return (["theta", "particle_index"] + [f"x_{k + 1}" for k in range(d)] + [f"v_{k + 1}" for k in range(d)]
            + ["sigma_of_particle", "phi", "energy", "degenerate_flag"])


def _writer(handle):
    return csv.writer(handle, lineterminator="\n")


def emit_trajectory(traj: Trajectory, path) -> Path:
    """One row per (sample, particle)."""
    path = Path(path)
    n, d = traj.position.shape[1:]
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(trajectory_columns(d))
        for k in range(traj.n_samples):
            head = fmt(traj.theta[k])
            tail = [fmt(traj.phi[k]), fmt(traj.energy[k]), str(int(traj.degenerate[k]))]
            for a in range(n):
                w.writerow([head, str(a)]
                           + [fmt(c) for c in traj.position[k, a]]
                           + [fmt(c) for c in traj.velocity[k, a]]
                           + [str(int(traj.sigma[k, a]))] + tail)
    return path


def read_trajectory(path, h: float = float("nan"), scheme: Scheme | str = Scheme.VERLET) -> Trajectory:
    """Inverse of :func:`emit_trajectory`; ``h`` and ``scheme`` are not stored in the file."""
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(name.startswith("x_") for name in header)
    if header != trajectory_columns(d):
        raise ValueError(f"unexpected trajectory header: {header}")
    n = 1 + max(int(r[1]) for r in body)
    if len(body) % n:
        raise ValueError(f"{len(body)} rows is not a multiple of N={n}")
    k = len(body) // n
    table = np.array(body, dtype=object).reshape(k, n, len(header))
    as_float = np.vectorize(float, otypes=[np.float64])
    return Trajectory(
        theta=as_float(table[:, 0, 0]),
        position=as_float(table[:, :, 2:2 + d]),
        velocity=as_float(table[:, :, 2 + d:2 + 2 * d]),
        sigma=table[:, :, 2 + 2 * d].astype(np.intp),
        phi=as_float(table[:, 0, 3 + 2 * d]),
        energy=as_float(table[:, 0, 4 + 2 * d]),
        degenerate=table[:, 0, 5 + 2 * d].astype(int).astype(bool),
        h=float(h),
        scheme=Scheme(scheme),
    )


def emit_rate_table(table: RateTable, path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(RATE_COLUMNS)
        for row in zip(table.epsilon, table.minus_eps_log_p, table.rate_limit, table.gap):
            w.writerow([fmt(v) for v in row])
    return path


def read_rate_table(path) -> RateTable:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != RATE_COLUMNS:
        raise ValueError(f"unexpected rate table header: {rows[0]}")
    cols = np.array([[float(v) for v in r] for r in rows[1:]]).T
    return RateTable(*cols)


def emit_rows(path, header: list[str], rows) -> Path:
    """Generic table writer; floats get 17 significant digits, everything else ``str``."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row])
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
