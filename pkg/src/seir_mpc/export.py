"""CSV and text writers for trajectories, logs, solutions and reports.

Every CSV starts with the comment line ``# schema=1`` followed by a
header row. Floats are written with ``repr`` so files are reproducible
byte for byte and round-trip exactly. Wall-clock timings only go to the
text logs, never to CSV.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from seir_mpc.errors import ConfigError
from seir_mpc.integrate import Trajectory
from seir_mpc.model import ModelParams, _stage_cost
from seir_mpc.mpc import MpcLog, MpcRecord

SCHEMA_LINE = "# schema=1"

TRAJECTORY_COLUMNS = ["t", "S", "E", "I", "R", "beta", "gamma", "stage_cost"]
CLOSED_LOOP_COLUMNS = TRAJECTORY_COLUMNS + ["V_T", "decrease_margin"]
LOG_COLUMNS = [
    "iteration", "t", "S", "E", "I", "V_T", "V_T_next", "stage_integral",
    "decrease_margin", "status", "kkt_residual", "constraint_violation",
]
OCP_COLUMNS = ["k", "t", "S", "E", "I", "beta", "gamma", "stage_cost"]
CERT_COLUMNS = ["name", "n_samples", "worst_margin", "passed"]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return str(v)


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    """Read a file written by :func:`write_csv`.

    Raises:
        ConfigError: if the schema line is missing or unsupported.
    """
    with Path(path).open(newline="") as fh:
        first = fh.readline().strip()
        if first != SCHEMA_LINE:
            raise ConfigError(f"{path}: expected '{SCHEMA_LINE}', got {first!r}")
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: missing header")
    return rows[0], rows[1:]


def _node_inputs(traj: Trajectory) -> np.ndarray:
    # inputs live on intervals; the last node repeats the last input
    if len(traj.inputs) == 0:
        return np.full((len(traj.times), 2), math.nan)
    return np.vstack([traj.inputs, traj.inputs[-1:]])


def trajectory_rows(traj: Trajectory, p: ModelParams):
    U = _node_inputs(traj)
    X = traj.states
    costs = _stage_cost(X, U, p)
    for t, x, u, c in zip(traj.times, X, U, np.atleast_1d(costs)):
        yield [float(t), x[0], x[1], x[2], 1.0 - x.sum(), u[0], u[1], float(c)]


def write_trajectory(path, traj: Trajectory, p: ModelParams) -> Path:
    return write_csv(path, TRAJECTORY_COLUMNS, trajectory_rows(traj, p))


def write_closed_loop(path, traj: Trajectory, log: MpcLog, p: ModelParams) -> Path:
    """Closed-loop CSV; ``V_T`` and the margin are filled at iteration starts."""
    at = {round(r.t, 9): r for r in log}
    rows = []
    for row in trajectory_rows(traj, p):
        r = at.get(round(row[0], 9))
        rows.append(row + ([r.V_T, r.decrease_margin] if r else [None, None]))
    return write_csv(path, CLOSED_LOOP_COLUMNS, rows)


def write_mpc_log(path, log: MpcLog) -> Path:
    rows = [
        [r.iteration, r.t, r.state[0], r.state[1], r.state[2], r.V_T, r.V_T_next,
         r.stage_integral, r.decrease_margin, r.status, r.kkt_residual, r.constraint_violation]
        for r in log
    ]
    return write_csv(path, LOG_COLUMNS, rows)


def read_mpc_log(path) -> MpcLog:
    header, rows = read_csv(path)
    if header != LOG_COLUMNS:
        raise ConfigError(f"{path}: not an MPC log (columns {header})")

    def num(s: str) -> float:
        return float(s) if s else math.nan

    log = MpcLog(terminated=True)
    for row in rows:
        d = dict(zip(header, row))
        log.records.append(MpcRecord(
            iteration=int(d["iteration"]),
            t=num(d["t"]),
            state=np.array([num(d["S"]), num(d["E"]), num(d["I"])]),
            V_T=num(d["V_T"]),
            inputs=np.empty((0, 2)),
            stage_integral=num(d["stage_integral"]),
            status=d["status"],
            kkt_residual=num(d["kkt_residual"]),
            constraint_violation=num(d["constraint_violation"]),
            wall_time=math.nan,
            decrease_margin=num(d["decrease_margin"]),
            V_T_next=num(d["V_T_next"]),
        ))
    return log


def mpc_log_text(log: MpcLog) -> str:
    lines = []
    for r in log:
        lines.append(
            f"iter={r.iteration} t={r.t:g} V_T={r.V_T:.10e} int_l={r.stage_integral:.6e} "
            f"margin={r.decrease_margin:.3e} status={r.status} kkt={r.kkt_residual:.2e} "
            f"viol={r.constraint_violation:.2e} wall={r.wall_time:.3f}s"
        )
    return "\n".join(lines) + ("\n" if lines else "")


def write_ocp_solution(path, sol, h: float, p: ModelParams) -> Path:
    X = sol.traj.states
    U = sol.u_star
    rows = []
    for k in range(len(X)):
        u = U[k] if k < len(U) else (U[-1] if len(U) else np.full(2, math.nan))
        rows.append([k, k * h, X[k, 0], X[k, 1], X[k, 2], u[0], u[1], float(_stage_cost(X[k], u, p))])
    return write_csv(path, OCP_COLUMNS, rows)


def write_cert_reports(path, reports) -> Path:
    keys = sorted({k for r in reports for k in r.values})
    rows = [[r.name, r.n_samples, r.worst_margin, r.passed] + [r.values.get(k) for k in keys] for r in reports]
    return write_csv(path, CERT_COLUMNS + keys, rows)


def cert_reports_text(reports) -> str:
    out = []
    for r in reports:
        out.append(r.summary())
        out.extend(f"    {d}" for d in r.details)
    return "\n".join(out) + "\n"
