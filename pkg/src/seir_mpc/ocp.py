"""Direct transcription of the finite-horizon optimal control problem.

The horizon ``[0, T]`` is split into ``M = T / h`` explicit Euler steps
with one constant input pair per step. The objective is the left-endpoint
rectangle rule ``h * sum_k l(x_k, u_k)``, the infection cap is imposed at
the nodes ``x_1 .. x_M``, and the input box is handled by projection.

Solver: augmented Lagrangian (Powell-Hestenes-Rockafellar) on the node
constraints ``I_k - i_max <= 0``, each subproblem minimised over the input
box by a spectral projected-gradient method with Armijo backtracking.
Gradients come from the discrete adjoint of the Euler recursion.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import Bounds, minimize, nnls

from seir_mpc.errors import BudgetExceededError, DomainError
from seir_mpc.integrate import Trajectory
from seir_mpc.model import ModelParams, _stage_cost, as_state, in_XM

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class OcpSpec:
    """One instance of the finite-horizon problem."""

    x0: np.ndarray
    T: float
    p: ModelParams
    h: float = 0.25

    def __post_init__(self) -> None:
        object.__setattr__(self, "x0", as_state(self.x0))
        if self.T <= 0 or self.h <= 0:
            raise DomainError("T and h must be positive")
        m = self.T / self.h
        if abs(m - round(m)) > 1e-9 * max(1.0, m):
            raise DomainError(f"T={self.T} is not a multiple of h={self.h}")

    @property
    def M(self) -> int:
        return int(round(self.T / self.h))

    def nominal_inputs(self) -> np.ndarray:
        return np.tile(self.p.u_nom, (self.M, 1))


@dataclass(frozen=True)
class SolverOptions:
    opt_tol: float = 1e-8
    feas_tol: float = 1e-8
    mu0: float = 1.0
    mu_growth: float = 10.0
    mu_max: float = 1e6
    max_outer: int = 40
    max_inner: int = 20000
    armijo: float = 1e-4
    step_min: float = 1e-12
    step_max: float = 1e12
    inner: str = "lbfgsb"
    verbose: bool = False


@dataclass
class OcpSolution:
    """Result of :func:`solve`.

    ``constraint_violation`` is ``max_k (I_k - i_max)_+`` over the nodes
    and ``kkt_residual`` the sup-norm of the projected Lagrangian gradient.
    """

    u_star: np.ndarray
    cost: float
    traj: Trajectory
    status: str
    kkt_residual: float
    constraint_violation: float
    multipliers: np.ndarray = field(repr=False, default=None)
    iterations: int = 0
    evaluations: int = 0

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


# ---------------------------------------------------------------------------
# Transcription kernels
# ---------------------------------------------------------------------------


def rollout(x0, u, p: ModelParams, h: float) -> np.ndarray:
    """Euler node states ``x_0 .. x_M`` for the input sequence ``u``."""
    return np.array(_forward(as_state(x0).tolist(), np.asarray(u, float).tolist(), p, h))


def _forward(x0: list, U: list, p: ModelParams, h: float) -> list:
    eta = p.eta
    s, e, i = x0
    xs = [(s, e, i)]
    for b, g in U:
        inf = b * s * i
        s, e, i = s - h * inf, e + h * (inf - eta * e), i + h * (eta * e - g * i)
        xs.append((s, e, i))
    return xs


def _evaluate(x0: list, U: list, p: ModelParams, h: float, y=None, mu: float = 0.0):
    """Objective, penalty term and gradient in one forward/backward sweep.

    The penalty is the PHR augmented-Lagrangian term for ``I_k <= i_max``
    at nodes ``k = 1..M`` with multipliers ``y`` and penalty ``mu``.

    Returns:
        ``(J, P, grad, x3)`` with ``grad`` of ``J + P`` as a list of pairs
        and ``x3`` the node infections ``I_1 .. I_M``.
    """
    eta, lam, bn, gn, imax = p.eta, p.lam, p.beta_nom, p.gamma_nom, p.i_max
    w = 1.0 - lam
    xs = _forward(x0, U, p, h)
    M = len(U)
    J = 0.0
    for k in range(M):
        _, e, i = xs[k]
        b, g = U[k]
        J += lam * (e * e + i * i) + w * ((b - bn) ** 2 + (g - gn) ** 2)
    J *= h
    pen = 0.0
    dpen = [0.0] * (M + 1)
    if y is not None:
        inv = 1.0 / mu
        for k in range(1, M + 1):
            yk = y[k - 1]
            a = yk + mu * (xs[k][2] - imax)
            if a > 0.0:
                pen += 0.5 * inv * (a * a - yk * yk)
                dpen[k] = a
            else:
                pen -= 0.5 * inv * yk * yk
    # adjoint sweep: lam_k = dL/dx_k
    ls, le, li = 0.0, 0.0, dpen[M]
    grad = [None] * M
    for k in range(M - 1, -1, -1):
        s, e, i = xs[k]
        b, g = U[k]
        # gradient wrt u_k: direct stage part + dynamics through x_{k+1}
        si = s * i
        gb = h * (2.0 * w * (b - bn) + si * (le - ls))
        gg = h * (2.0 * w * (g - gn) - i * li)
        grad[k] = (gb, gg)
        # x_k adjoint: stage cost + (I + h f_x)^T lam_{k+1} + penalty
        bi = b * i
        bs = b * s
        ns = ls + h * bi * (le - ls)
        ne = le + h * (2.0 * lam * e + eta * (li - le))
        ni = li + h * (2.0 * lam * i + bs * (le - ls) - g * li) + dpen[k]
        ls, le, li = ns, ne, ni
    x3 = [xs[k][2] for k in range(1, M + 1)]
    return J, pen, grad, x3


def objective(spec: OcpSpec, u) -> float:
    """Transcribed cost ``h * sum_k l(x_k, u_k)``."""
    U = np.asarray(u, float).reshape(spec.M, 2).tolist()
    J, _, _, _ = _evaluate(spec.x0.tolist(), U, spec.p, spec.h)
    return J


def gradient(spec: OcpSpec, u) -> np.ndarray:
    """Exact gradient of :func:`objective` with respect to the inputs, ``(M, 2)``."""
    U = np.asarray(u, float).reshape(spec.M, 2).tolist()
    _, _, g, _ = _evaluate(spec.x0.tolist(), U, spec.p, spec.h)
    return np.array(g)


def constraint_violation(spec: OcpSpec, u) -> float:
    xs = rollout(spec.x0, u, spec.p, spec.h)
    return float(max(0.0, np.max(xs[1:, 2] - spec.p.i_max)))


def project(u: np.ndarray, p: ModelParams) -> np.ndarray:
    """Clip every input pair onto the box ``U``."""
    return np.clip(u, p.u_lower, p.u_upper)


def make_trajectory(spec: OcpSpec, u: np.ndarray) -> Trajectory:
    xs = rollout(spec.x0, u, spec.p, spec.h)
    u = np.asarray(u, float).reshape(spec.M, 2)
    return Trajectory(
        times=spec.h * np.arange(spec.M + 1),
        states=xs,
        inputs=u.copy(),
        cost_samples=np.asarray(_stage_cost(xs[:-1], u, spec.p), dtype=float),
    )


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


class _Subproblem:
    """Augmented-Lagrangian merit over the box, with evaluation caching."""

    def __init__(self, spec: OcpSpec, y: np.ndarray, mu: float) -> None:
        self.x0 = spec.x0.tolist()
        self.p = spec.p
        self.h = spec.h
        self.y = y.tolist()
        self.mu = mu
        self.nevals = 0

    def __call__(self, u: np.ndarray):
        self.nevals += 1
        J, pen, g, x3 = _evaluate(self.x0, u.tolist(), self.p, self.h, self.y, self.mu)
        return J + pen, np.array(g), J, np.array(x3)


def _pg_norm(u: np.ndarray, g: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    return float(np.max(np.abs(np.clip(u - g, lo, hi) - u))) if u.size else 0.0


def _spg(fun: _Subproblem, u: np.ndarray, lo, hi, tol: float, opts: SolverOptions, max_iter: int):
    """Spectral projected gradient with monotone Armijo backtracking.

    Returns ``(u, f, g, J, x3, pg_norm, iterations, converged)``.
    """
    f, g, J, x3 = fun(u)
    pg = _pg_norm(u, g, lo, hi)
    alpha = 1.0 / max(pg, 1e-16) if pg > 0 else 1.0
    alpha = min(max(alpha, opts.step_min), opts.step_max)
    it = 0
    while pg > tol and it < max_iter:
        it += 1
        d = np.clip(u - alpha * g, lo, hi) - u
        gtd = float(np.sum(g * d))
        if gtd >= 0.0:
            # not a descent direction; fall back to the projected gradient
            alpha = 1.0
            d = np.clip(u - g, lo, hi) - u
            gtd = float(np.sum(g * d))
            if gtd >= 0.0:
                break
        t = 1.0
        while True:
            un = u + t * d
            fn, gn, Jn, x3n = fun(un)
            if fn <= f + opts.armijo * t * gtd:
                break
            if t < 1e-20:
                break
            # safeguarded quadratic interpolation
            denom = 2.0 * (fn - f - t * gtd)
            tq = -gtd * t * t / denom if denom > 0 else 0.5 * t
            t = min(max(tq, 0.1 * t), 0.5 * t)
        if fn > f:
            break
        s = un - u
        yv = gn - g
        sty = float(np.sum(s * yv))
        if sty > 0:
            alpha = min(max(float(np.sum(s * s)) / sty, opts.step_min), opts.step_max)
        else:
            alpha = opts.step_max
        u, f, g, J, x3 = un, fn, gn, Jn, x3n
        pg = _pg_norm(u, g, lo, hi)
    return u, f, g, J, x3, pg, it, pg <= tol


def _lbfgsb(fun: _Subproblem, u: np.ndarray, lo, hi, tol: float, opts: SolverOptions, max_iter: int):
    """Box-constrained L-BFGS-B on the merit; same return layout as :func:`_spg`."""
    shape = u.shape

    def f(v):
        val, g, _, _ = fun(v.reshape(shape))
        return val, g.ravel()

    res = minimize(
        f,
        u.ravel(),
        jac=True,
        method="L-BFGS-B",
        bounds=Bounds(lo.ravel(), hi.ravel()),
        options={"maxiter": max_iter, "ftol": 0.0, "gtol": tol, "maxcor": 30, "maxls": 40},
    )
    u = np.clip(res.x.reshape(shape), lo, hi)
    f_val, g, J, x3 = fun(u)
    pg = _pg_norm(u, g, lo, hi)
    return u, f_val, g, J, x3, pg, int(res.nit), pg <= tol


_INNER = {"spg": _spg, "lbfgsb": _lbfgsb}


def solve(
    spec: OcpSpec,
    warm_start=None,
    options: SolverOptions | None = None,
) -> OcpSolution:
    """Locally solve the transcribed problem.

    Args:
        spec: Problem instance.
        warm_start: Initial input sequence ``(M, 2)``; defaults to ``u_nom``.
        options: Tolerances and budgets.

    Returns:
        Solution with status ``converged``, ``max-iter`` or ``infeasible``.
        When the warm start is feasible, the returned cost never exceeds
        its cost by more than ``opt_tol``.
    """
    opts = options or SolverOptions()
    p = spec.p
    M = spec.M
    lo = np.tile(p.u_lower, (M, 1))
    hi = np.tile(p.u_upper, (M, 1))
    if warm_start is None:
        u = spec.nominal_inputs()
    else:
        u = np.array(warm_start, dtype=float)
        if u.shape != (M, 2):
            raise DomainError(f"warm start has shape {u.shape}, expected {(M, 2)}")
    u = np.clip(u, lo, hi)
    u_start = u.copy()
    J_start = objective(spec, u_start)
    start_feasible = constraint_violation(spec, u_start) <= opts.feas_tol

    y = np.zeros(M)
    mu = opts.mu0
    viol_prev = math.inf
    inner_tol = max(opts.opt_tol, 1e-4)
    inner = _INNER[opts.inner]
    total_it = 0
    total_evals = 0
    status = MAX_ITER
    pg = math.inf
    viol = math.inf
    # aim below the reported tolerance so closed-loop states keep a margin
    target = 0.1 * opts.feas_tol
    for outer in range(opts.max_outer):
        fun = _Subproblem(spec, y, mu)
        u, f, g, J, x3, pg, it, ok = inner(fun, u, lo, hi, inner_tol, opts, opts.max_inner)
        total_it += it
        total_evals += fun.nevals
        c = x3 - p.i_max
        viol = float(max(0.0, c.max())) if M else 0.0
        # first-order multiplier update; grad of the merit is the Lagrangian gradient
        y = np.maximum(0.0, y + mu * c)
        if opts.verbose:
            logger.info(
                "outer %d: J=%.10e viol=%.3e pg=%.3e mu=%.1e inner_it=%d",
                outer, J, viol, pg, mu, it,
            )
        if viol <= target:
            kkt, _ = kkt_residual(spec, u)
            if kkt > opts.opt_tol and pg <= 1e3 * opts.opt_tol:
                refined = _polish(spec, u, opts)
                if refined is not None:
                    u = refined
                    kkt, _ = kkt_residual(spec, u)
            if kkt <= opts.opt_tol:
                status = CONVERGED
                break
        if viol > target and viol > 0.25 * viol_prev:
            mu = min(mu * opts.mu_growth, opts.mu_max)
        viol_prev = viol
        inner_tol = max(opts.opt_tol, 0.1 * inner_tol)
    else:
        if viol > opts.feas_tol:
            status = INFEASIBLE
        elif kkt_residual(spec, u)[0] <= opts.opt_tol:
            status = CONVERGED
        else:
            status = MAX_ITER

    J = objective(spec, u)
    kkt, y = kkt_residual(spec, u)
    if start_feasible and (viol > opts.feas_tol or J > J_start + opts.opt_tol):
        logger.debug("falling back to feasible warm start (J=%.3e vs %.3e)", J, J_start)
        u, J, viol = u_start, J_start, constraint_violation(spec, u_start)
        kkt, y = kkt_residual(spec, u)
    if status == CONVERGED and not (viol <= opts.feas_tol):
        status = INFEASIBLE
    return OcpSolution(
        u_star=u,
        cost=J,
        traj=make_trajectory(spec, u),
        status=status,
        kkt_residual=kkt,
        constraint_violation=viol,
        multipliers=y,
        iterations=total_it,
        evaluations=total_evals,
    )


def infection_jacobian(spec: OcpSpec, u) -> np.ndarray:
    """Sensitivities ``dI_k / du`` for nodes ``k = 1..M``, shape ``(M, 2M)``.

    Column ``2j`` is the derivative with respect to ``beta_j`` and ``2j+1``
    with respect to ``gamma_j``.
    """
    U = np.asarray(u, float).reshape(spec.M, 2)
    xs = rollout(spec.x0, U, spec.p, spec.h)
    M, h, eta = spec.M, spec.h, spec.p.eta
    S = np.zeros((3, 2 * M))
    out = np.zeros((M, 2 * M))
    for k in range(M):
        s, e, i = xs[k]
        b, g = U[k]
        A = np.array([
            [1.0 - h * b * i, 0.0, -h * b * s],
            [h * b * i, 1.0 - h * eta, h * b * s],
            [0.0, h * eta, 1.0 - h * g],
        ])
        S = A @ S
        S[0, 2 * k] -= h * s * i
        S[1, 2 * k] += h * s * i
        S[2, 2 * k + 1] -= h * i
        out[k] = S[2]
    return out


def kkt_residual(spec: OcpSpec, u, active_tol: float = 1e-7):
    """First-order optimality residual with least-squares multipliers.

    Multipliers for the nearly active node constraints are fitted by
    nonnegative least squares on the free input components; the residual
    is the sup-norm of the projected Lagrangian gradient.

    Returns:
        ``(residual, multipliers)`` with one multiplier per node.
    """
    p = spec.p
    u = np.asarray(u, float).reshape(spec.M, 2)
    lo = np.tile(p.u_lower, (spec.M, 1))
    hi = np.tile(p.u_upper, (spec.M, 1))
    g = gradient(spec, u)
    y = np.zeros(spec.M)
    xs = rollout(spec.x0, u, p, spec.h)
    active = np.flatnonzero(xs[1:, 2] - p.i_max >= -active_tol)
    if active.size:
        A = infection_jacobian(spec, u)[active]
        width = 1e-12 * np.maximum(1.0, np.abs(u.ravel()))
        free = (u.ravel() > lo.ravel() + width) & (u.ravel() < hi.ravel() - width)
        if free.any():
            ya, _ = nnls(A[:, free].T, -g.ravel()[free])
            y[active] = ya
        g = g + (A.T @ y[active]).reshape(spec.M, 2)
    return _pg_norm(u, g, lo, hi), y


def _free_mask(u: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    width = 1e-12 * np.maximum(1.0, np.abs(u))
    return (u > lo + width) & (u < hi - width)


def _polish(spec: OcpSpec, u: np.ndarray, opts: SolverOptions, max_steps: int = 4):
    """Active-set Newton refinement of a nearly optimal feasible point.

    Holds the inputs sitting on a bound and the nearly active node
    constraints fixed, and takes Newton steps on the resulting
    equality-constrained problem with a finite-difference Hessian of the
    adjoint gradient. Returns the refined inputs, or ``None`` if no step
    improved the KKT residual while staying feasible and inside ``U``.
    """
    p = spec.p
    M = spec.M
    lo = np.tile(p.u_lower, (M, 1)).ravel()
    hi = np.tile(p.u_upper, (M, 1)).ravel()
    best = u.ravel().copy()
    best_kkt, _ = kkt_residual(spec, best)
    improved = False
    cur = best.copy()
    for _ in range(max_steps):
        xs = rollout(spec.x0, cur.reshape(M, 2), p, spec.h)
        c = xs[1:, 2] - p.i_max
        _, y = kkt_residual(spec, cur)
        act = np.flatnonzero((c >= -1e-7) & (y > 0))
        free = np.flatnonzero(_free_mask(cur, lo, hi))
        if free.size == 0:
            break
        g = gradient(spec, cur.reshape(M, 2)).ravel()
        eps = 1e-6
        H = np.empty((free.size, free.size))
        for col, j in enumerate(free):
            d = np.zeros_like(cur)
            d[j] = eps
            gp = gradient(spec, (cur + d).reshape(M, 2)).ravel()
            gm = gradient(spec, (cur - d).reshape(M, 2)).ravel()
            H[:, col] = (gp - gm)[free] / (2 * eps)
        H = 0.5 * (H + H.T)
        if act.size:
            A = infection_jacobian(spec, cur.reshape(M, 2))[np.ix_(act, free)]
            K = np.block([[H, A.T], [A, np.zeros((act.size, act.size))]])
            rhs = np.concatenate([-g[free], -c[act]])
        else:
            K, rhs = H, -g[free]
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            break
        nxt = cur.copy()
        nxt[free] += sol[: free.size]
        if np.any(nxt < lo) or np.any(nxt > hi):
            break
        kkt, _ = kkt_residual(spec, nxt)
        viol = constraint_violation(spec, nxt.reshape(M, 2))
        if viol > 0.1 * opts.feas_tol or kkt >= best_kkt:
            break
        best, best_kkt, cur = nxt, kkt, nxt
        improved = True
        if kkt <= opts.opt_tol:
            break
    return best.reshape(M, 2) if improved else None


def value_T(x0, T: float, p: ModelParams, h: float = 0.25, warm_start=None,
            options: SolverOptions | None = None) -> float:
    """Optimal finite-horizon cost, ``+inf`` when no feasible input is found."""
    sol = solve(OcpSpec(x0, T, p, h), warm_start=warm_start, options=options)
    if sol.status == INFEASIBLE:
        return math.inf
    return sol.cost


def value_inf_estimate(
    x0,
    p: ModelParams,
    h: float = 0.25,
    tail_tol: float = 1e-12,
    max_days: float = 50000.0,
) -> float:
    """Upper bound on the infinite-horizon value from a constructive policy.

    From ``X_M`` the policy is ``u_nom``; otherwise the staged strategy
    (maximal intervention, holding feedback, then ``u_nom``) is used. The
    running cost is integrated on the Euler grid until it drops below
    ``tail_tol``; the remainder is closed with the exponential tail
    ``l(t_end) / (2 * rate)`` using the decay rate fitted on the last
    stretch of the run.

    Raises:
        BudgetExceededError: if ``tail_tol`` is not reached in ``max_days``.
    """
    x = as_state(x0)
    if x[1] == 0.0 and x[2] == 0.0:
        return 0.0
    cost = 0.0
    if not in_XM(x, p):
        from seir_mpc.certify import staged_reach_XM

        traj, _ = staged_reach_XM(x, p, h=h)
        cost += traj.cost_integral()
        x = traj.final_state
    tail, _ = nominal_cost_to_go(x, p, h=h, tail_tol=tail_tol, max_days=max_days)
    return cost + tail


def nominal_cost_to_go(x0, p: ModelParams, h: float = 0.25, tail_tol: float = 1e-12,
                       max_days: float = 50000.0, chunk_days: float = 500.0,
                       min_days: float = 50.0):
    """Running cost of ``u_nom`` from ``x0`` with exponential tail closure.

    The run stops once the stage cost is below both ``tail_tol`` and
    ``1e-6`` times its initial value, and not before ``min_days`` so the
    tail rate can be fitted.

    Returns:
        ``(cost, info)`` where ``info`` holds the truncation time, the
        fitted tail rate and the final state.
    """
    x = np.asarray(x0, float).copy()
    lam, eta, bn, gn = p.lam, p.eta, p.beta_nom, p.gamma_nom
    cost = 0.0
    t = 0.0
    n_chunk = int(round(chunk_days / h))
    hist_t, hist_l = [], []
    s, e, i = x.tolist()
    if e == 0.0 and i == 0.0:
        return 0.0, {"t_end": 0.0, "rate": math.inf, "state": x}
    stop = min(tail_tol, 1e-6 * lam * (e * e + i * i))
    min_steps = int(round(min_days / h))
    while True:
        ell = lam * (e * e + i * i)
        if ell < stop and len(hist_t) >= min_steps:
            break
        if t >= max_days:
            raise BudgetExceededError(f"stage cost still {ell:.3e} after {max_days} days")
        for _ in range(n_chunk):
            ell = lam * (e * e + i * i)
            if ell < stop and len(hist_t) >= min_steps:
                break
            cost += h * ell
            hist_t.append(t)
            hist_l.append(ell)
            inf = bn * s * i
            s, e, i = s - h * inf, e + h * (inf - eta * e), i + h * (eta * e - gn * i)
            t += h
    rate = _tail_rate(hist_t, hist_l)
    ell_end = lam * (e * e + i * i)
    tail = ell_end / (2.0 * rate) if rate > 0 and ell_end > 0 else 0.0
    return cost + tail, {"t_end": t, "rate": rate, "state": np.array([s, e, i])}


def _tail_rate(ts: list, ls: list) -> float:
    """Decay rate of ``|(E, I)|`` fitted on the last quarter of a run."""
    n = len(ts)
    if n < 8:
        return 0.0
    a = np.asarray(ts[3 * n // 4:])
    b = np.log(np.maximum(np.asarray(ls[3 * n // 4:]), 1e-300))
    slope = np.polyfit(a, b, 1)[0]
    # stage cost is quadratic in the state, so halve the exponent
    return max(-0.5 * slope, 0.0)
