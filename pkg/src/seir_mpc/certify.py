"""Numerical certificates for invariance, cost bounds and value decrease.

Every check returns a :class:`CertReport` whose margins are oriented so
that a nonnegative worst-case margin means the property held on all
samples. Sampling is seeded for reproducibility.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from seir_mpc.errors import BudgetExceededError, DomainError, InfeasibleError
from seir_mpc.integrate import STEPPERS, Trajectory, simulate_batch
from seir_mpc.model import (
    ModelParams,
    _rhs,
    _stage_cost,
    as_state,
    in_A_prime_inner,
    in_XM,
    stage_cost_min,
)

logger = logging.getLogger(__name__)

#: Constraint activity tolerance on the boundary of ``X_M``.
ACTIVE_TOL = 1e-12


@dataclass
class CertReport:
    """Outcome of one certification check."""

    name: str
    n_samples: int
    worst_margin: float
    passed: bool
    details: list[str] = field(default_factory=list)
    values: dict = field(default_factory=dict)

    def summary(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        extra = " ".join(f"{k}={_fmt(v)}" for k, v in self.values.items())
        return f"[{flag}] {self.name}: n={self.n_samples} worst_margin={self.worst_margin:.6e} {extra}".rstrip()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _report(name: str, margins, tol: float = 0.0, details=None, values=None) -> CertReport:
    margins = np.asarray(margins, dtype=float)
    worst = float(margins.min()) if margins.size else math.inf
    return CertReport(
        name=name,
        n_samples=int(margins.size),
        worst_margin=worst,
        passed=bool(worst >= -tol),
        details=list(details or []),
        values=dict(values or {}),
    )


@dataclass(frozen=True)
class DecayFit:
    """Exponential envelope ``|(E, I)(t)| <= Gamma * exp(-rate * t) * |(E, I)(0)|``."""

    Gamma: float
    rate: float
    fit_rmse: float

    @property
    def rho_bound(self) -> float:
        """Cost-controllability constant implied by the envelope."""
        return 2.0 * self.Gamma**2 / self.rate


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_XM(p: ModelParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples of the box ``X_M``."""
    b = p.bounds
    hi = np.array([b.xbar1, b.xbar2, p.i_max])
    X = rng.uniform(0.0, 1.0, size=(n, 3)) * hi
    # the box lies inside the simplex for sensible parameters; reject otherwise
    keep = X.sum(axis=1) <= 1.0
    while not keep.all():
        X[~keep] = rng.uniform(0.0, 1.0, size=(int((~keep).sum()), 3)) * hi
        keep = X.sum(axis=1) <= 1.0
    return X


def sample_X(p: ModelParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples of ``X`` by rejection from ``[0,1]^2 x [0, i_max]``."""
    out = []
    while len(out) < n:
        X = rng.uniform(0.0, 1.0, size=(2 * n, 3)) * np.array([1.0, 1.0, p.i_max])
        out.extend(X[X.sum(axis=1) <= 1.0])
    return np.array(out[:n])


def sample_A_prime_inner(p: ModelParams, n: int, rng: np.random.Generator,
                         h: float = 0.05, method: str = "rk4") -> np.ndarray:
    """Samples of ``X`` certified in ``A'`` by the maximal-intervention oracle.

    Pass the transcription's ``h`` and ``"euler"`` to get states whose
    transcribed problems are feasible; near the boundary of the admissible
    set the coarse Euler grid overshoots the infection peak.
    """
    out = []
    while len(out) < n:
        for x in sample_X(p, n, rng):
            try:
                if in_A_prime_inner(x, p, h=h, method=method):
                    out.append(x)
            except BudgetExceededError:
                continue
            if len(out) == n:
                break
    return np.array(out)


# ---------------------------------------------------------------------------
# Boundary flow of X_M
# ---------------------------------------------------------------------------


def lie_derivatives_on_XM_boundary(x, u, p: ModelParams) -> dict[str, float]:
    """Derivatives of the active box constraints along the vector field.

    The box is ``g1 = S - xbar1 <= 0``, ``g2 = E - xbar2 <= 0`` and
    ``g3 = I - i_max <= 0``.

    Returns:
        Mapping from the active constraint names (``"g1"``, ``"g2"``,
        ``"g3"``) to ``L_f g_i(x, u)``.

    Raises:
        DomainError: if no constraint is active at ``x``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    b = p.bounds
    f = _rhs(x, u, p)
    g = {"g1": x[0] - b.xbar1, "g2": x[1] - b.xbar2, "g3": x[2] - p.i_max}
    out = {name: float(f[i]) for i, name in enumerate(("g1", "g2", "g3")) if abs(g[name]) <= ACTIVE_TOL}
    if not out:
        raise DomainError(f"no X_M constraint is active at {x.tolist()}")
    return out


def XM_boundary_mesh(p: ModelParams, m: int = 19) -> np.ndarray:
    """Regular ``m x m`` grids on the three outer faces of ``X_M``."""
    b = p.bounds
    s = np.linspace(0.0, 1.0, m)
    A, B = np.meshgrid(s, s, indexing="ij")
    A, B = A.ravel(), B.ravel()
    faces = [
        np.column_stack([np.full_like(A, b.xbar1), A * b.xbar2, B * p.i_max]),
        np.column_stack([A * b.xbar1, np.full_like(A, b.xbar2), B * p.i_max]),
        np.column_stack([A * b.xbar1, B * b.xbar2, np.full_like(A, p.i_max)]),
    ]
    return np.vstack(faces)


def check_lie_boundary(p: ModelParams, m: int = 19, inputs: str = "corners") -> CertReport:
    """Sign of the boundary flow on a mesh of the outer faces of ``X_M``.

    ``inputs="nominal"`` uses ``u_nom`` only; ``"corners"`` also tries the
    four corners of ``U`` (the derivatives are affine in ``u``).
    """
    us = [p.u_nom]
    if inputs == "corners":
        us += [np.array([a, c]) for a in (p.beta_min, p.beta_nom) for c in (p.gamma_nom, p.gamma_max)]
    margins = []
    worst_at = None
    for x in XM_boundary_mesh(p, m):
        for u in us:
            v = max(lie_derivatives_on_XM_boundary(x, u, p).values())
            margins.append(-v)
            if worst_at is None or -v < worst_at[0]:
                worst_at = (-v, x, u)
    details = [f"worst at x={worst_at[1].tolist()} u={worst_at[2].tolist()}"] if worst_at else []
    return _report("xm-lie-boundary", margins, tol=1e-12, details=details, values={"mesh_points": len(margins) // len(us)})


# ---------------------------------------------------------------------------
# Invariance of X_M
# ---------------------------------------------------------------------------


def _box_margin(X: np.ndarray, p: ModelParams) -> np.ndarray:
    b = p.bounds
    return np.minimum.reduce([
        b.xbar1 - X[..., 0],
        b.xbar2 - X[..., 1],
        p.i_max - X[..., 2],
        X[..., 0],
        X[..., 1],
        X[..., 2],
    ])


def check_XM_invariance(
    p: ModelParams,
    n_samples: int = 1000,
    horizon: float = 300.0,
    input_law: str = "both",
    seed: int = 0,
    h: float = 0.25,
    method: str = "euler",
    hold_days: float = 1.0,
    x0s=None,
    tol: float = 1e-9,
) -> CertReport:
    """Simulate from ``X_M`` and verify the state never leaves the box.

    Args:
        input_law: ``"random"`` (piecewise-constant uniform draws from
            ``U`` held for ``hold_days``), ``"nominal"`` or ``"both"``.
        x0s: Optional explicit initial states. Those outside ``X_M`` are
            reported as out-of-domain and do not count as failures.
    """
    rng = np.random.default_rng(seed)
    if x0s is None:
        X0 = sample_XM(p, n_samples, rng)
        outside = np.empty((0, 3))
    else:
        X0 = np.atleast_2d(np.asarray(x0s, dtype=float))
        inside = np.array([in_XM(x, p) for x in X0], dtype=bool)
        outside = X0[~inside]
        X0 = X0[inside]
    n_steps = int(round(horizon / h))
    hold = max(1, int(round(hold_days / h)))
    laws = ["random", "nominal"] if input_law == "both" else [input_law]
    margins = np.full(len(X0), np.inf)
    details = []
    lo, hi = p.u_lower, p.u_upper
    for law in laws:
        if law == "nominal":
            def inputs(k, X):
                return np.broadcast_to(p.u_nom, (X.shape[0], 2))
        elif law == "random":
            draws = rng.uniform(lo, hi, size=(n_steps // hold + 1, len(X0), 2))

            def inputs(k, X, draws=draws):
                return draws[k // hold]
        else:
            raise DomainError(f"unknown input law {law!r}")
        if len(X0):
            traj = simulate_batch(X0, inputs, n_steps, h, p, method=method)
            margins = np.minimum(margins, _box_margin(traj, p).min(axis=0))
    n_exit = int(np.sum(margins < -tol))
    details.append(f"exits={n_exit}")
    out_of_domain = []
    for x in outside:
        out_of_domain.append(_negative_control(x, p, horizon, h, method))
        details.append(f"out-of-domain x0={x.tolist()} nominal max I={out_of_domain[-1]:.6g}")
    return _report(
        "xm-invariance",
        margins,
        tol=tol,
        details=details,
        values={"exits": n_exit, "laws": "+".join(laws), "out_of_domain": len(outside)},
    )


def _negative_control(x0, p: ModelParams, horizon: float, h: float, method: str) -> float:
    step = STEPPERS[method]
    x = np.asarray(x0, float)
    peak = x[2]
    for _ in range(int(round(horizon / h))):
        x = step(x, p.u_nom, h, p)
        peak = max(peak, x[2])
    return float(peak)


# ---------------------------------------------------------------------------
# Cost bounds on X_M
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UniformBound:
    """Nominal infinite-horizon cost against its closed-form bound."""

    C: float
    J_inf: float
    x1_inf: float
    days: float

    @property
    def margin(self) -> float:
        return self.C - self.J_inf


def uniform_bound_C(x0, p: ModelParams, h: float = 0.25, tail_tol: float = 1e-12,
                    max_days: float = 50000.0) -> UniformBound:
    """Closed-form bound on the nominal cost from a point of ``X_M``.

    ``C = lam * ((S0 - S_inf + E0) / eta + (S0 - S_inf + E0 + I0) / gamma_nom)``
    with ``S_inf`` taken from a long nominal run. The Euler/rectangle
    discretisation satisfies the same integral identities exactly, so the
    comparison is free of quadrature bias.

    Raises:
        DomainError: if ``x0`` is not in ``X_M``.
    """
    from seir_mpc.ocp import nominal_cost_to_go

    x = as_state(x0)
    if not in_XM(x, p):
        raise DomainError(f"{x.tolist()} is not in X_M")
    J, info = nominal_cost_to_go(x, p, h=h, tail_tol=tail_tol, max_days=max_days)
    x1_inf = float(info["state"][0])
    s0, e0, i0 = x
    C = p.lam * ((s0 - x1_inf + e0) / p.eta + (s0 - x1_inf + e0 + i0) / p.gamma_nom)
    return UniformBound(C=float(C), J_inf=float(J), x1_inf=x1_inf, days=float(info["t_end"]))


def check_uniform_bound(p: ModelParams, n_samples: int = 200, seed: int = 0, h: float = 0.25) -> CertReport:
    rng = np.random.default_rng(seed)
    margins = [uniform_bound_C(x, p, h=h).margin for x in sample_XM(p, n_samples, rng)]
    return _report("uniform-bound", margins, tol=1e-8)


def estimate_decay(
    p: ModelParams,
    n_samples: int = 200,
    seed: int = 0,
    horizon: float = 600.0,
    h: float = 0.25,
    method: str = "euler",
    x0s=None,
) -> DecayFit:
    """Fit an exponential envelope to nominal runs started in ``X_M``.

    The rate is the smallest tail slope of ``log |(E, I)|`` over the
    samples; ``Gamma`` is then the least overshoot making the envelope
    hold at every grid node of every sample.

    Raises:
        BudgetExceededError: if some sample shows no decay (fit failure).
    """
    if n_samples < 10 and x0s is None:
        raise DomainError("need at least 10 samples")
    rng = np.random.default_rng(seed)
    X0 = sample_XM(p, n_samples, rng) if x0s is None else np.atleast_2d(np.asarray(x0s, float))
    n_steps = int(round(horizon / h))
    traj = simulate_batch(X0, lambda k, X: np.broadcast_to(p.u_nom, (X.shape[0], 2)), n_steps, h, p, method=method)
    norms = np.hypot(traj[..., 1], traj[..., 2])  # (steps+1, n)
    t = h * np.arange(n_steps + 1)
    n0 = norms[0]
    live = n0 > 0
    if not live.any():
        return DecayFit(Gamma=1.0, rate=math.inf, fit_rmse=0.0)
    tail = slice(n_steps // 2, None)
    rates, rmses = [], []
    for j in np.flatnonzero(live):
        y = np.log(np.maximum(norms[tail, j], 1e-300))
        A = np.column_stack([t[tail], np.ones_like(t[tail])])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        rates.append(-coef[0])
        rmses.append(float(np.sqrt(np.mean((A @ coef - y) ** 2))))
    rate = float(min(rates))
    if not rate > 0:
        raise BudgetExceededError(f"no exponential decay detected (rate={rate:.3e})")
    ratio = norms[:, live] * np.exp(rate * t)[:, None] / n0[live][None, :]
    Gamma = max(1.0, float(ratio.max()))
    return DecayFit(Gamma=Gamma, rate=rate, fit_rmse=float(np.mean(rmses)))


def cost_controllability(
    p: ModelParams,
    n_samples: int = 200,
    seed: int = 0,
    h: float = 0.25,
    decay: DecayFit | None = None,
    slack: float = 0.05,
) -> CertReport:
    """Empirical ratio ``V_inf(x) / l*(x)`` over samples of ``X_M``.

    Passes when every ratio is finite and the largest stays below
    ``2 * Gamma^2 / rate`` from the fitted envelope (with ``slack``).
    """
    from seir_mpc.ocp import value_inf_estimate

    rng = np.random.default_rng(seed)
    X0 = sample_XM(p, n_samples, rng)
    X0 = np.array([x for x in X0 if stage_cost_min(x, p) >= 1e-14])
    if decay is None:
        decay = estimate_decay(p, x0s=X0, h=h)
    ratios = np.array([value_inf_estimate(x, p, h=h) / stage_cost_min(x, p) for x in X0])
    finite = np.isfinite(ratios)
    rho_emp = float(ratios.max()) if ratios.size else 0.0
    rho_bound = decay.rho_bound
    margins = np.where(finite, (1.0 + slack) * rho_bound - ratios, -np.inf)
    return _report(
        "cost-controllability",
        margins,
        details=[f"non-finite ratios: {int((~finite).sum())}"],
        values={
            "rho_emp": rho_emp,
            "rho_bound": rho_bound,
            "rho_lam_weighted": 2.0 * p.lam * decay.Gamma**2 / decay.rate,
            "Gamma": decay.Gamma,
            "rate": decay.rate,
        },
    )


def cost_ratio_outside_XM(p: ModelParams, x1: float = 0.5, scales=(1e-2, 5e-3, 2e-3, 1e-3),
                          h: float = 0.25) -> np.ndarray:
    """Ratio ``V_inf / l*`` along ``(x1, s, s)`` for shrinking ``s``.

    With ``x1 > xbar1`` the ratio is expected to grow without bound; this
    is the documented failure of cost controllability outside ``X_M``.
    """
    from seir_mpc.ocp import value_inf_estimate

    out = []
    for s in scales:
        x = np.array([x1, s, s])
        out.append(value_inf_estimate(x, p, h=h, max_days=200000.0) / stage_cost_min(x, p))
    return np.array(out)


# ---------------------------------------------------------------------------
# Constructive reach strategy
# ---------------------------------------------------------------------------


def holding_feedback(x, p: ModelParams) -> np.ndarray:
    """Saturated feedback freezing ``E`` and ``I`` while ``S`` drains.

    ``beta = sat(eta*E / (S*I))`` and ``gamma = sat(eta*E / I)``; when
    neither saturates both ``dE/dt`` and ``dI/dt`` vanish. Returns
    ``u_nom`` when ``I`` (or ``S``) is numerically zero.
    """
    s, e, i = float(x[0]), float(x[1]), float(x[2])
    if i <= 1e-14 or s <= 1e-14:
        return p.u_nom
    b = min(max(p.eta * e / (s * i), p.beta_min), p.beta_nom)
    g = min(max(p.eta * e / i, p.gamma_nom), p.gamma_max)
    return np.array([b, g])


def _phase1_event(x, u, h, p, step, tol):
    """Bisect the first zero of ``eta*E - gamma_max*I`` within one step."""
    a, b = 0.0, h
    while b - a > tol:
        mid = 0.5 * (a + b)
        y = step(x, u, mid, p)
        if p.eta * y[1] - p.gamma_max * y[2] > 0:
            a = mid
        else:
            b = mid
    return b


def staged_reach_XM(
    x0,
    p: ModelParams,
    h: float = 0.25,
    method: str = "euler",
    max_days: float = 20000.0,
    event_tol: float = 1e-10,
) -> tuple[Trajectory, float]:
    """Drive ``x0`` into ``X_M`` with the three-phase constructive policy.

    Phase 1 applies the maximal intervention until ``dI/dt`` changes sign,
    the crossing refined by bisection; phase 2 applies
    :func:`holding_feedback` until the state enters ``X_M``. The caller
    continues with ``u_nom`` from there.

    Returns:
        The trajectory up to the entry time and the entry time itself.

    Raises:
        InfeasibleError: if the infection cap is violated.
        BudgetExceededError: if ``X_M`` is not reached within ``max_days``.
    """
    x = as_state(x0)
    step = STEPPERS[method]
    times, states, inputs = [0.0], [x.copy()], []
    t = 0.0
    if in_XM(x, p):
        return _traj(times, states, inputs, p, t_phase1=0.0, t_reach=0.0), 0.0

    def push(dt, u, y):
        nonlocal t, x
        inputs.append(np.asarray(u, float).copy())
        t += dt
        times.append(t)
        states.append(y.copy())
        x = y
        if y[2] > p.i_max + 1e-12:
            raise InfeasibleError(f"infection cap violated at t={t:.4f}: I={y[2]:.6g}", state=y)

    u_hat = p.u_max_intervention
    # phase 1: maximal intervention while I is still growing
    while p.eta * x[1] - p.gamma_max * x[2] > 0 and not in_XM(x, p):
        if t > max_days:
            raise BudgetExceededError("phase 1 did not end")
        y = step(x, u_hat, h, p)
        if p.eta * y[1] - p.gamma_max * y[2] <= 0:
            dt = _phase1_event(x, u_hat, h, p, step, event_tol)
            push(dt, u_hat, step(x, u_hat, dt, p))
            break
        push(h, u_hat, y)
    t_phase1 = t
    # phase 2: holding feedback until X_M is entered
    while not in_XM(x, p):
        if t > max_days:
            raise BudgetExceededError(f"X_M not reached within {max_days} days")
        u = holding_feedback(x, p)
        push(h, u, step(x, u, h, p))
    return _traj(times, states, inputs, p, t_phase1=t_phase1, t_reach=t), t


def _traj(times, states, inputs, p, **meta) -> Trajectory:
    S = np.array(states)
    U = np.array(inputs) if inputs else np.empty((0, 2))
    costs = np.asarray(_stage_cost(S[:-1], U, p), float) if len(U) else np.empty(0)
    tr = Trajectory(times=np.array(times), states=S, inputs=U, cost_samples=costs)
    tr.t_enter_XM = meta.get("t_reach")
    tr.meta.update(meta)
    return tr


# ---------------------------------------------------------------------------
# (A3) and Lyapunov decrease
# ---------------------------------------------------------------------------


def gronwall_constant(T: float, p: ModelParams) -> float:
    """``exp(2 * T * max(eta, gamma_max))``."""
    return math.exp(2.0 * T * max(p.eta, p.gamma_max))


def check_A3(
    p: ModelParams,
    T: float = 20.0,
    samples=None,
    deltas=(0.25, 1.0, 5.0, 20.0),
    n_samples: int = 200,
    seed: int = 0,
    h: float = 0.25,
) -> CertReport:
    """Verify ``delta * l*(x) <= Cbar * V_delta(x)`` on samples of ``A'``.

    Samples whose ``V_delta`` problem is infeasible are excluded and noted.
    """
    from seir_mpc.ocp import value_T

    for d in deltas:
        if not 0 < d <= T:
            raise DomainError(f"delta={d} outside (0, T]")
    Cbar = gronwall_constant(T, p)
    if samples is None:
        samples = sample_A_prime_inner(p, n_samples, np.random.default_rng(seed), h=h, method="euler")
    margins, details = [], []
    for x in np.atleast_2d(samples):
        ls = stage_cost_min(x, p)
        for d in deltas:
            V = value_T(x, d, p, h=h)
            if not math.isfinite(V):
                details.append(f"excluded x0={x.tolist()} delta={d}: infeasible")
                continue
            margins.append(Cbar * V - d * ls)
    return _report("a3", margins, details=details, values={"Cbar": Cbar, "T": T})


def lyapunov_alphas(log) -> np.ndarray:
    """Per-iteration ``alpha_k = 1 - (V_k - V_{k+1}) / int l``.

    Iterations whose stage integral is below ``1e-14`` or whose successor
    value is missing are skipped.
    """
    alphas = []
    for r in log:
        if not (r.stage_integral >= 1e-14 and math.isfinite(r.V_T_next) and math.isfinite(r.V_T)):
            continue
        alphas.append(1.0 - (r.V_T - r.V_T_next) / r.stage_integral)
    return np.array(alphas)


def lyapunov_monitor(log) -> CertReport:
    """Largest relaxation factor ``alpha`` along a closed-loop log.

    Passes iff ``alpha_max < 1``; a log with no qualifying iteration is
    vacuously fine and reports ``alpha_max = -inf``.
    """
    alphas = lyapunov_alphas(log)
    alpha_max = float(alphas.max()) if alphas.size else -math.inf
    rep = _report("lyapunov", 1.0 - alphas if alphas.size else [], values={"alpha_max": alpha_max})
    rep.passed = bool(alpha_max < 1.0)
    return rep


def check_staged(x0, p: ModelParams, h: float = 0.25, horizons=(2.0, 5.0, 20.0)) -> CertReport:
    """Staged strategy from ``x0``: cap respected and cost above ``V_T``.

    Margins are ``i_max - max I`` along the strategy and, for each horizon
    ``T``, the staged running cost on ``[0, T]`` minus ``V_T(x0)``.
    """
    from seir_mpc.integrate import Constant, simulate
    from seir_mpc.ocp import value_T

    traj, t_reach = staged_reach_XM(x0, p, h=h)
    margins = [p.i_max - float(traj.states[:, 2].max())]
    t_end = max(horizons)
    n_tail = int(math.ceil(max(t_end - traj.times[-1], 0.0) / h - 1e-9))
    tail = simulate(traj.final_state, Constant(p.u_nom), n_tail * h, p, h=h, t0=traj.times[-1])
    full = Trajectory.concatenate([traj, tail])
    for T in horizons:
        mask = full.times[:-1] < T - 1e-12
        J_T = float(np.sum((np.minimum(full.times[1:], T) - full.times[:-1])[mask] * full.cost_samples[mask]))
        margins.append(J_T - value_T(x0, T, p, h=h))
    return _report("staged", margins, tol=1e-9, values={"t_reach": t_reach, "J_reach": traj.cost_integral()})
