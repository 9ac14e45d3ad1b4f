"""Constrained SEIR dynamics, quadratic stage cost and constraint sets.

States are proportions ``x = (S, E, I)``; the removed compartment is
``R = 1 - S - E - I``. Inputs are ``u = (beta, gamma)``, the transmission
and removal rates, boxed in ``[beta_min, beta_nom] x [gamma_nom, gamma_max]``.

The dynamics read::

    dS/dt = -beta * S * I
    dE/dt =  beta * S * I - eta * E
    dI/dt =  eta * E - gamma * I

All functions here are pure and accept plain sequences or numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from seir_mpc.errors import BudgetExceededError, DomainError

#: Absolute slack used when validating nonnegativity and the simplex bound.
STATE_TOL = 1e-12


@dataclass(frozen=True)
class ModelParams:
    """Epidemiological rates, constraint levels and the cost weight.

    Defaults are the reference scenario values:
    ``beta_nom = 0.44``, ``gamma_nom = 1/6.5``, ``beta_min = 0.22``,
    ``gamma_max = 0.5``, ``eta = 1/4.6`` and ``i_max = 0.05``.
    """

    beta_min: float = 0.22
    beta_nom: float = 0.44
    gamma_nom: float = 1.0 / 6.5
    gamma_max: float = 0.5
    eta: float = 1.0 / 4.6
    i_max: float = 0.05
    epsilon: float = 1e-6
    lam: float = 0.5

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise DomainError(f"{f.name} must be a finite number, got {v!r}")
        if not 0 < self.beta_min < self.beta_nom:
            raise DomainError("need 0 < beta_min < beta_nom")
        if not 0 < self.gamma_nom < self.gamma_max:
            raise DomainError("need 0 < gamma_nom < gamma_max")
        if self.eta <= 0:
            raise DomainError("eta must be positive")
        if not 0 < self.i_max <= 1:
            raise DomainError("i_max must lie in (0, 1]")
        if not 0 < self.lam <= 1:
            raise DomainError("lam must lie in (0, 1]")
        if self.epsilon <= 0:
            raise DomainError("epsilon must be positive")

    @property
    def u_nom(self) -> np.ndarray:
        """Nominal input (no intervention)."""
        return np.array([self.beta_nom, self.gamma_nom])

    @property
    def u_max_intervention(self) -> np.ndarray:
        """Strongest admissible intervention ``(beta_min, gamma_max)``."""
        return np.array([self.beta_min, self.gamma_max])

    @property
    def u_lower(self) -> np.ndarray:
        return np.array([self.beta_min, self.gamma_nom])

    @property
    def u_upper(self) -> np.ndarray:
        return np.array([self.beta_nom, self.gamma_max])

    @property
    def bounds(self) -> DerivedBounds:
        return DerivedBounds.from_params(self)

    def replace(self, **changes) -> ModelParams:
        d = asdict(self)
        d.update(changes)
        return ModelParams(**d)


@dataclass(frozen=True)
class DerivedBounds:
    """Box corners derived from :class:`ModelParams`.

    Attributes:
        xbar1: ``gamma_nom / beta_nom``, susceptible level below which the
            nominal reproduction number is at most one.
        xbar2: ``gamma_nom * i_max / eta``, exposed cap of the robust box.
        xunder1: ``gamma_max / beta_min``, susceptible cap of ``X_A``.
        xa2: ``gamma_max * i_max / eta``, exposed cap of ``X_A``.
    """

    xbar1: float
    xbar2: float
    xunder1: float
    xa2: float = field(default=0.0)

    @classmethod
    def from_params(cls, p: ModelParams) -> DerivedBounds:
        return cls(
            xbar1=p.gamma_nom / p.beta_nom,
            xbar2=p.gamma_nom * p.i_max / p.eta,
            xunder1=p.gamma_max / p.beta_min,
            xa2=p.gamma_max * p.i_max / p.eta,
        )


def as_state(x: Sequence[float], tol: float = STATE_TOL) -> np.ndarray:
    """Validate and convert a state triple.

    Raises:
        DomainError: if a component is negative, above one, or the
            compartments sum to more than one (beyond ``tol``).
    """
    arr = np.asarray(x, dtype=float)
    if arr.shape != (3,):
        raise DomainError(f"state must have three components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"state has non-finite entries: {arr}")
    if np.any(arr < -tol) or np.any(arr > 1 + tol) or arr.sum() > 1 + tol:
        raise DomainError(f"state {arr.tolist()} is outside the unit simplex")
    return arr


def as_input(u: Sequence[float], p: ModelParams, tol: float = 1e-12) -> np.ndarray:
    """Validate and convert an input pair against the box ``U``."""
    arr = np.asarray(u, dtype=float)
    if arr.shape != (2,):
        raise DomainError(f"input must have two components, got shape {arr.shape}")
    if not in_U(arr, p, tol):
        raise DomainError(f"input {arr.tolist()} is outside U")
    return arr


def rhs(x, u, p: ModelParams) -> np.ndarray:
    """Right-hand side of the controlled SEIR system.

    Returns:
        ``(dS/dt, dE/dt, dI/dt)``; the components sum to ``-gamma * I``.

    Raises:
        DomainError: if ``x`` or ``u`` violate their invariants.
    """
    x = as_state(x)
    u = as_input(u, p)
    return _rhs(x, u, p)


def _rhs(x: np.ndarray, u: np.ndarray, p: ModelParams) -> np.ndarray:
    # Unchecked and broadcasting over leading axes: x[..., 3], u[..., 2].
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    infection = u[..., 0] * x1 * x3
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (3,)))
    out[..., 0] = -infection
    out[..., 1] = infection - p.eta * x2
    out[..., 2] = p.eta * x2 - u[..., 1] * x3
    return out


def stage_cost(x, u, p: ModelParams) -> float:
    """Quadratic running cost.

    ``lam * (E^2 + I^2) + (1 - lam) * |u - u_nom|^2``. The susceptible
    compartment is deliberately not penalised.
    """
    x = as_state(x)
    u = as_input(u, p)
    return _stage_cost(x, u, p)


def _stage_cost(x, u, p: ModelParams):
    du1 = u[..., 0] - p.beta_nom
    du2 = u[..., 1] - p.gamma_nom
    return p.lam * (x[..., 1] ** 2 + x[..., 2] ** 2) + (1.0 - p.lam) * (du1 * du1 + du2 * du2)


def stage_cost_min(x, p: ModelParams) -> float:
    """Minimum of the stage cost over ``U``; attained at ``u_nom``."""
    x = as_state(x)
    return float(p.lam * (x[1] ** 2 + x[2] ** 2))


def reduced_stage_cost_min(x2: float, x3: float, p: ModelParams) -> float:
    """Stage-cost minimum seen as a function of the infected pair only.

    This is positive definite in ``(E, I)`` and is sandwiched between
    ``lam * |(E, I)|^2`` from both sides, i.e. it equals it.
    """
    return float(p.lam * (x2 * x2 + x3 * x3))


# ---------------------------------------------------------------------------
# Set membership
# ---------------------------------------------------------------------------


def in_X(x, p: ModelParams, tol: float = STATE_TOL) -> bool:
    """State constraint set: unit simplex with the infection cap."""
    x = np.asarray(x, dtype=float)
    return bool(
        np.all(x >= -tol)
        and np.all(x <= 1 + tol)
        and x.sum() <= 1 + tol
        and x[2] - p.i_max <= tol
    )


def in_U(u, p: ModelParams, tol: float = 0.0) -> bool:
    u = np.asarray(u, dtype=float)
    return bool(
        p.beta_min - tol <= u[0] <= p.beta_nom + tol
        and p.gamma_nom - tol <= u[1] <= p.gamma_max + tol
    )


def in_XM(x, p: ModelParams, tol: float = STATE_TOL) -> bool:
    """Robust invariant box ``X_M``: ``S <= xbar1``, ``E <= xbar2``, ``I <= i_max``."""
    b = p.bounds
    return in_X(x, p, tol) and x[0] <= b.xbar1 + tol and x[1] <= b.xbar2 + tol


def in_XA(x, p: ModelParams, tol: float = STATE_TOL) -> bool:
    """Box ``X_A``, invariant under the maximal intervention."""
    b = p.bounds
    return in_X(x, p, tol) and x[0] <= b.xunder1 + tol and x[1] <= b.xa2 + tol


def in_E_nom(x, p: ModelParams, tol: float = 0.0) -> bool:
    """Approximate membership of the nominal disease-free equilibria."""
    if tol < 0:
        raise DomainError("tol must be nonnegative")
    return bool(x[1] <= tol and x[2] <= tol and x[0] <= p.bounds.xbar1 + tol)


def in_N_eps(x, p: ModelParams) -> bool:
    """Thin region near the non-nominal equilibria excluded from ``A'``.

    Points with ``S >= xbar1`` whose infection mass ``I * (E + I)`` is
    below ``epsilon``. The strict ``<`` keeps states with
    ``I * (E + I) >= epsilon`` inside ``A'``.
    """
    return bool(x[0] >= p.bounds.xbar1 and x[2] * (x[1] + x[2]) < p.epsilon)


def in_A_prime_inner(
    x0,
    p: ModelParams,
    h: float = 0.05,
    max_days: float = 2000.0,
    method: str = "rk4",
) -> bool:
    """Sufficient test for membership of ``A'``.

    Runs the maximal intervention from ``x0`` and requires the infection
    cap to hold until the trajectory enters ``X_A`` (which the maximal
    intervention keeps invariant), then rejects the excluded region
    ``N_eps``. A ``False`` answer is inconclusive.

    Raises:
        BudgetExceededError: if ``X_A`` is not entered within ``max_days``.
    """
    from seir_mpc.integrate import STEPPERS

    x = as_state(x0)
    if not in_X(x, p):
        return False
    if in_N_eps(x, p):
        return False
    step = STEPPERS[method]
    u_hat = p.u_max_intervention
    n = int(math.ceil(max_days / h))
    for _ in range(n + 1):
        if x[2] > p.i_max + STATE_TOL:
            return False
        if in_XA(x, p):
            return True
        x = step(x, u_hat, h, p)
    raise BudgetExceededError(f"X_A not entered within {max_days} days from {np.asarray(x0).tolist()}")
