"""Receding-horizon control without terminal cost or terminal constraint."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from seir_mpc.errors import BudgetExceededError, DomainError, InfeasibleError, ThresholdNotReachedError
from seir_mpc.integrate import PiecewiseConstant, Trajectory, simulate
from seir_mpc.model import ModelParams, as_state, in_A_prime_inner, in_X
from seir_mpc.ocp import CONVERGED, INFEASIBLE, OcpSolution, OcpSpec, SolverOptions, solve

logger = logging.getLogger(__name__)

#: Thresholds on ``max(E, I)`` used for the epidemic lifetime table.
LIFETIME_THRESHOLDS = (1e-5, 1e-6, 1e-7, 1e-8)


@dataclass(frozen=True)
class MpcConfig:
    """Settings of the closed loop.

    The prediction horizon is ``T = N * delta``; each iteration applies the
    first ``delta`` days of the optimal input.
    """

    p: ModelParams = field(default_factory=ModelParams)
    delta: float = 1.0
    N: int = 20
    h: float = 0.25
    termination_tol: float = 1e-8
    max_sim_days: float = 3000.0
    plant_method: str = "euler"
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self) -> None:
        if self.delta <= 0 or self.h <= 0:
            raise DomainError("delta and h must be positive")
        if int(self.N) != self.N or self.N < 1:
            raise DomainError("N must be a positive integer")
        r = self.delta / self.h
        if abs(r - round(r)) > 1e-9:
            raise DomainError(f"delta={self.delta} is not a multiple of h={self.h}")
        if self.termination_tol <= 0:
            raise DomainError("termination_tol must be positive")

    @property
    def T(self) -> float:
        return self.N * self.delta

    @property
    def steps_per_delta(self) -> int:
        return int(round(self.delta / self.h))


@dataclass
class MpcRecord:
    iteration: int
    t: float
    state: np.ndarray
    V_T: float
    inputs: np.ndarray
    stage_integral: float
    status: str
    kkt_residual: float
    constraint_violation: float
    wall_time: float
    decrease_margin: float = math.nan
    V_T_next: float = math.nan


@dataclass
class MpcLog:
    """Per-iteration diagnostics of a closed-loop run."""

    records: list[MpcRecord] = field(default_factory=list)
    terminated: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def all_converged(self) -> bool:
        return all(r.status == CONVERGED for r in self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def _shift(u_star: np.ndarray, d: int, p: ModelParams) -> np.ndarray:
    return np.vstack([u_star[d:], np.tile(p.u_nom, (d, 1))])


def _solve_with_retry(x: np.ndarray, cfg: MpcConfig, warm, k: int) -> OcpSolution:
    spec = OcpSpec(x, cfg.T, cfg.p, cfg.h)
    sol = solve(spec, warm_start=warm, options=cfg.solver)
    if sol.status != CONVERGED and warm is not None:
        logger.info("iteration %d: warm-started solve %s, retrying cold", k, sol.status)
        cold = solve(spec, options=cfg.solver)
        if cold.status == CONVERGED or (sol.status == INFEASIBLE and cold.status != INFEASIBLE):
            sol = cold
    if sol.status == INFEASIBLE:
        raise InfeasibleError(
            f"OCP infeasible at iteration {k} from state {x.tolist()}", iteration=k, state=x
        )
    return sol


def mpc_feedback(x, cfg: MpcConfig, warm_start=None) -> np.ndarray:
    """Input segment on ``[0, delta]``, one row per Euler step."""
    x = as_state(x)
    sol = _solve_with_retry(x, cfg, warm_start, 0)
    return sol.u_star[: cfg.steps_per_delta].copy()


def _infected(x) -> float:
    return max(x[1], x[2])


def run_mpc(x0, cfg: MpcConfig, warm_start=None) -> tuple[Trajectory, MpcLog]:
    """Run the closed loop until ``max(E, I) <= termination_tol``.

    Each iteration solves the horizon-``T`` problem from the current state,
    applies the first ``delta`` days of its optimal input to the plant and
    shifts the solution by ``delta`` (padding with ``u_nom``) as the next
    warm start.

    Raises:
        InfeasibleError: if some iteration's problem has no feasible input.
        BudgetExceededError: if ``max_sim_days`` pass without termination.
    """
    x = as_state(x0)
    p = cfg.p
    if not in_X(x, p):
        raise DomainError(f"initial state {x.tolist()} violates the state constraint")
    try:
        if not in_A_prime_inner(x, p):
            logger.warning("initial state %s not certified in A'", x.tolist())
    except BudgetExceededError:
        logger.warning("A' certification of %s inconclusive", x.tolist())

    log = MpcLog()
    parts: list[Trajectory] = [
        Trajectory(times=np.array([0.0]), states=x[None, :], inputs=np.empty((0, 2)), cost_samples=np.empty(0))
    ]
    d = cfg.steps_per_delta
    t = 0.0
    warm = warm_start
    k = 0
    while _infected(x) > cfg.termination_tol:
        if t >= cfg.max_sim_days - 1e-9:
            raise BudgetExceededError(f"no termination within {cfg.max_sim_days} days")
        tic = time.perf_counter()
        sol = _solve_with_retry(x, cfg, warm, k)
        seg = sol.u_star[:d]
        piece = simulate(x, PiecewiseConstant(seg, cfg.h, t0=t), cfg.delta, p, h=cfg.h,
                         method=cfg.plant_method, t0=t)
        rec = MpcRecord(
            iteration=k,
            t=t,
            state=x.copy(),
            V_T=sol.cost,
            inputs=seg.copy(),
            stage_integral=piece.cost_integral(),
            status=sol.status,
            kkt_residual=sol.kkt_residual,
            constraint_violation=sol.constraint_violation,
            wall_time=time.perf_counter() - tic,
        )
        if log.records:
            prev = log.records[-1]
            prev.V_T_next = sol.cost
            prev.decrease_margin = sol.cost - prev.V_T + prev.stage_integral
        log.records.append(rec)
        parts.append(piece)
        x = piece.final_state
        t += cfg.delta
        warm = _shift(sol.u_star, d, p)
        k += 1
        if k % 50 == 0:
            logger.info("t=%.2f max(E,I)=%.3e V_T=%.4e", t, _infected(x), sol.cost)
    if log.records:
        # close the last decrease margin with the value at the final state
        last = log.records[-1]
        final = _solve_with_retry(x, cfg, warm, k)
        last.V_T_next = final.cost
        last.decrease_margin = final.cost - last.V_T + last.stage_integral
    log.terminated = True
    traj = Trajectory.concatenate(parts)
    traj.meta.update(method=cfg.plant_method, h=cfg.h)
    return traj, log


def epidemic_lifetime(traj: Trajectory, thresholds=LIFETIME_THRESHOLDS) -> tuple[float, ...]:
    """Days until ``max(E, I)`` first drops below each threshold.

    The crossing is located by linear interpolation between grid nodes.

    Raises:
        ThresholdNotReachedError: if some threshold is never crossed.
    """
    m = np.maximum(traj.states[:, 1], traj.states[:, 2])
    out = []
    for val in thresholds:
        below = np.flatnonzero(m < val)
        if below.size == 0:
            raise ThresholdNotReachedError(f"max(E, I) never drops below {val:g}")
        j = int(below[0])
        if j == 0:
            out.append(float(traj.times[0]))
            continue
        m0, m1 = m[j - 1], m[j]
        t0, t1 = traj.times[j - 1], traj.times[j]
        frac = (m0 - val) / (m0 - m1) if m0 != m1 else 1.0
        out.append(float(t0 + frac * (t1 - t0)))
    return tuple(out)
