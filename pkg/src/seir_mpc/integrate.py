"""Fixed-step integration of the controlled SEIR system."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from seir_mpc.errors import DomainError
from seir_mpc.model import (
    STATE_TOL,
    ModelParams,
    _rhs,
    _stage_cost,
    as_state,
    in_U,
    in_X,
    in_XA,
    in_XM,
)

logger = logging.getLogger(__name__)

#: Default transcription / plant step in days.
DEFAULT_H = 0.25


def _clamp(x: np.ndarray) -> np.ndarray:
    if np.any(x < 0.0):
        logger.debug("clamped negative state components %s", x[x < 0.0])
        x = np.maximum(x, 0.0)
    return x


def step_euler(x, u, h: float, p: ModelParams) -> np.ndarray:
    """One explicit Euler step, negative components clamped to zero."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return _clamp(x + h * _rhs(x, u, p))


def step_rk4(x, u, h: float, p: ModelParams) -> np.ndarray:
    """One classical Runge-Kutta step with ``u`` held over the step."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = _rhs(x, u, p)
    k2 = _rhs(x + 0.5 * h * k1, u, p)
    k3 = _rhs(x + 0.5 * h * k2, u, p)
    k4 = _rhs(x + h * k3, u, p)
    return _clamp(x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


STEPPERS: dict[str, Callable] = {"euler": step_euler, "rk4": step_rk4}


# ---------------------------------------------------------------------------
# Control signals
# ---------------------------------------------------------------------------


class ControlSignal:
    """Input law evaluated once per integration step (sample and hold)."""

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


class Constant(ControlSignal):
    def __init__(self, u) -> None:
        self.u = np.asarray(u, dtype=float)

    def __call__(self, t, x):
        return self.u


class PiecewiseConstant(ControlSignal):
    """Input sequence ``values[k]`` applied on ``[t0 + k*dt, t0 + (k+1)*dt)``.

    After the last segment the ``tail`` input is used; without a tail,
    evaluating past the end raises :class:`DomainError`.
    """

    def __init__(self, values, dt: float, tail=None, t0: float = 0.0) -> None:
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        self.dt = float(dt)
        self.t0 = float(t0)
        self.tail = None if tail is None else np.asarray(tail, dtype=float)

    def __call__(self, t, x):
        k = int(math.floor((t - self.t0) / self.dt + 1e-9))
        if k < len(self.values):
            return self.values[k]
        if self.tail is None:
            raise DomainError(f"piecewise-constant signal undefined at t={t}")
        return self.tail


class Feedback(ControlSignal):
    """State feedback ``u = rule(x)``."""

    def __init__(self, rule: Callable[[np.ndarray], np.ndarray]) -> None:
        self.rule = rule

    def __call__(self, t, x):
        return np.asarray(self.rule(x), dtype=float)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Sampled solution on a uniform time grid.

    ``inputs[k]`` and ``cost_samples[k]`` belong to the interval
    ``[times[k], times[k+1])``.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    cost_samples: np.ndarray
    t_enter_XM: float | None = None
    t_enter_XA: float | None = None
    t_violation: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.states) != len(self.times):
            raise ValueError("states and times differ in length")
        if len(self.inputs) != max(len(self.times) - 1, 0):
            raise ValueError("need one input per interval")

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def cost_integral(self) -> float:
        """Left-endpoint rectangle rule for the running cost."""
        if len(self.times) < 2:
            return 0.0
        dt = np.diff(self.times)
        return float(np.sum(dt * self.cost_samples))

    @classmethod
    def concatenate(cls, parts: list[Trajectory]) -> Trajectory:
        """Stitch consecutive trajectories sharing their junction nodes."""
        parts = [q for q in parts if q is not None]
        times = [parts[0].times]
        states = [parts[0].states]
        for q in parts[1:]:
            times.append(q.times[1:])
            states.append(q.states[1:])
        inputs = [q.inputs for q in parts if len(q.inputs)]
        costs = [q.cost_samples for q in parts if len(q.cost_samples)]
        return cls(
            times=np.concatenate(times),
            states=np.concatenate(states),
            inputs=np.concatenate(inputs) if inputs else np.empty((0, 2)),
            cost_samples=np.concatenate(costs) if costs else np.empty(0),
        )


def mark_entry_times(traj: Trajectory, p: ModelParams) -> None:
    """Fill in the first grid times in ``X_M``, in ``X_A`` and outside ``X``."""
    for k, (t, x) in enumerate(zip(traj.times, traj.states)):
        if traj.t_enter_XM is None and in_XM(x, p):
            traj.t_enter_XM = float(t)
        if traj.t_enter_XA is None and in_XA(x, p):
            traj.t_enter_XA = float(t)
        if traj.t_violation is None and not in_X(x, p, tol=1e-12):
            traj.t_violation = float(t)
        if traj.t_enter_XM is not None and traj.t_violation is not None:
            break


def simulate(
    x0,
    signal: ControlSignal,
    t_end: float,
    p: ModelParams,
    h: float = DEFAULT_H,
    method: str = "euler",
    t0: float = 0.0,
) -> Trajectory:
    """Integrate the closed or open loop from ``x0`` over ``[0, t_end]``.

    Records the first grid times at which the state lies in ``X_M``,
    in ``X_A``, and outside ``X`` (constraint violation).

    Raises:
        DomainError: if the signal returns an input outside ``U``, or
            ``t_end`` is not a multiple of ``h``.
    """
    if h <= 0:
        raise DomainError("step size must be positive")
    n_float = t_end / h
    n = int(round(n_float))
    if n < 0 or abs(n - n_float) > 1e-9 * max(1.0, n_float):
        raise DomainError(f"t_end={t_end} is not a nonnegative multiple of h={h}")
    x = as_state(x0)
    if not in_X(x, p, tol=1e-8):
        logger.warning("initial state %s is outside X", x.tolist())
    step = STEPPERS[method]
    states = np.empty((n + 1, 3))
    inputs = np.empty((n, 2))
    states[0] = x
    for k in range(n):
        t = t0 + k * h
        u = signal(t, x)
        if not in_U(u, p, tol=1e-12):
            raise DomainError(f"signal returned {np.asarray(u).tolist()} outside U at t={t}")
        inputs[k] = u
        x = step(x, u, h, p)
        states[k + 1] = x
    costs = _stage_cost(states[:-1], inputs, p) if n else np.empty(0)
    traj = Trajectory(
        times=t0 + h * np.arange(n + 1),
        states=states,
        inputs=inputs,
        cost_samples=np.asarray(costs, dtype=float),
    )
    mark_entry_times(traj, p)
    traj.meta.update(method=method, h=h)
    return traj


def simulate_batch(
    x0s: np.ndarray,
    inputs_fn: Callable[[int, np.ndarray], np.ndarray],
    n_steps: int,
    h: float,
    p: ModelParams,
    method: str = "euler",
) -> np.ndarray:
    """Integrate many initial states at once.

    Args:
        x0s: Array ``(n, 3)`` of initial states.
        inputs_fn: ``inputs_fn(k, X)`` returning an ``(n, 2)`` input array
            for step ``k`` given current states ``X``.
        n_steps: Number of steps.

    Returns:
        Array ``(n_steps + 1, n, 3)`` of states.
    """
    step = STEPPERS[method]
    X = np.asarray(x0s, dtype=float)
    out = np.empty((n_steps + 1,) + X.shape)
    out[0] = X
    for k in range(n_steps):
        X = step(X, inputs_fn(k, X), h, p)
        out[k + 1] = X
    return out


__all__ = [
    "DEFAULT_H",
    "STATE_TOL",
    "Constant",
    "ControlSignal",
    "Feedback",
    "PiecewiseConstant",
    "Trajectory",
    "mark_entry_times",
    "simulate",
    "simulate_batch",
    "step_euler",
    "step_rk4",
]
