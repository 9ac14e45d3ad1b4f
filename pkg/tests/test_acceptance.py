"""Acceptance criteria, one test and one PASS/FAIL line per criterion.

The lambda sweep is the expensive part (a few minutes on one core) and is
shared by criteria 1 to 3 and 5.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, X0_STUDY
from oracles import fd_gradient, lattice_best
from seir_mpc import certify
from seir_mpc.integrate import Constant, simulate
from seir_mpc.model import ModelParams, in_E_nom
from seir_mpc.mpc import MpcConfig, epidemic_lifetime, run_mpc
from seir_mpc.ocp import INFEASIBLE, OcpSpec, gradient, objective, solve

P = ModelParams()

# reference lifetimes (days until max(E, I) < 1e-5, 1e-6, 1e-7, 1e-8)
TABLE = {
    0.01: (186.5, 225.0, 263.75, 302.0),
    0.2: (188.75, 228.0, 267.5, 306.5),
    0.5: (196.75, 239.0, 281.25, 323.75),
    0.7: (212.25, 260.0, 307.5, 355.25),
    0.99: (612.0, 801.25, 988.0, 1175.0),
}
TOL_HALF = 0.15  # lambda = 0.5 entries
TOL_099 = 0.20  # lambda = 0.99 entries
CAP_SLACK = 1e-8
RUNTIME_LIMIT = 15 * 60.0


def record(n: int, ok: bool, text: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")


def _run(lam, N=20):
    cfg = MpcConfig(p=P.replace(lam=lam), N=N, delta=1.0, h=0.25)
    tic = time.perf_counter()
    traj, log = run_mpc(X0_STUDY, cfg)
    return {"traj": traj, "log": log, "wall": time.perf_counter() - tic, "cfg": cfg}


@pytest.fixture(scope="module")
def sweep():
    return {lam: _run(lam) for lam in TABLE}


@pytest.fixture(scope="module")
def short_horizon():
    return _run(0.5, N=2)


def _rel_err(got, ref):
    return max(abs(g - r) / r for g, r in zip(got, ref))


def test_01_table_lambda_half(sweep):
    run = sweep[0.5]
    lt = epidemic_lifetime(run["traj"])
    err = _rel_err(lt, TABLE[0.5])
    ok = err <= TOL_HALF and run["wall"] <= RUNTIME_LIMIT and run["log"].all_converged
    record(1, ok, f"lambda=0.5 lifetimes {tuple(round(float(v), 2) for v in lt)} vs {TABLE[0.5]}, "
                  f"max rel err {err:.3%} (tol {TOL_HALF:.0%}), runtime {run['wall']:.1f}s")
    assert ok


def test_02_table_monotone_in_lambda(sweep):
    lams = sorted(TABLE)
    rows = np.array([epidemic_lifetime(sweep[lam]["traj"]) for lam in lams])
    monotone = bool(np.all(np.diff(rows, axis=0) >= 0))
    nested = bool(np.all(np.diff(rows, axis=1) > 0))
    lt99 = rows[-1]
    err = _rel_err(lt99, TABLE[0.99])
    ok = monotone and nested and lt99[0] > 500 and err <= TOL_099
    record(2, ok, f"monotone in lambda={monotone}, lambda=0.99 lifetimes {tuple(round(float(v), 2) for v in lt99)} "
                  f"vs {TABLE[0.99]}, max rel err {err:.3%} (tol {TOL_099:.0%})")
    for lam, row in zip(lams, rows):
        ACCEPTANCE_LINES.append(f"              lambda={lam:<5g} " + " ".join(f"{v:8.2f}" for v in row))
    assert ok


def test_03_constraint_satisfaction(sweep, short_horizon):
    peaks = {lam: float(r["traj"].states[:, 2].max()) for lam, r in sweep.items()}
    peaks["T=2"] = float(short_horizon["traj"].states[:, 2].max())
    worst = max(peaks.values())
    ok = worst <= P.i_max + CAP_SLACK
    record(3, ok, f"max closed-loop I = 0.05 + {worst - P.i_max:.3e} (allowed +{CAP_SLACK:g}) over {len(peaks)} runs")
    assert ok


def test_04_shortest_horizon(short_horizon):
    run = short_horizon
    log, traj = run["log"], run["traj"]
    final = traj.final_state
    ok = log.all_converged and log.terminated and in_E_nom(final, P, tol=10 * run["cfg"].termination_tol)
    alpha = certify.lyapunov_monitor(log).values["alpha_max"]
    record(4, ok, f"T=2: {len(log)} iterations all converged={log.all_converged}, terminated at t={traj.times[-1]:g}, "
                  f"final state {np.array2string(final, precision=4)} (alpha_max={alpha:.3f}, informational)")
    assert ok


def test_05_relaxed_lyapunov(sweep):
    rep = certify.lyapunov_monitor(sweep[0.5]["log"])
    alpha = rep.values["alpha_max"]
    ok = rep.passed and alpha < 1
    record(5, ok, f"T=20 lambda=0.5 alpha_max = {alpha:.4f} over {rep.n_samples} iterations")
    assert ok


def test_06_xm_invariance():
    inv = certify.check_XM_invariance(P, n_samples=1000, horizon=300, input_law="both", seed=0)
    lie = certify.check_lie_boundary(P, inputs="nominal")
    max_lie = -lie.worst_margin
    ok = inv.passed and inv.values["exits"] == 0 and max_lie <= 1e-12
    record(6, ok, f"1000 samples x 300 days: exits={inv.values['exits']}, worst margin {inv.worst_margin:.3e}; "
                  f"boundary mesh ({lie.values['mesh_points']} points) max L_f g = {max_lie:.3e}")
    assert ok


def test_07_a3():
    rep = certify.check_A3(P, T=20, deltas=(0.25, 1.0, 5.0, 20.0), n_samples=200, seed=0)
    cbar = rep.values["Cbar"]
    violations = int(rep.worst_margin < 0)
    ok = rep.passed and math.isclose(cbar, 4.8517e8, rel_tol=1e-4) and rep.n_samples == 800
    record(7, ok, f"Cbar={cbar:.6e}, {rep.n_samples} (sample, delta) pairs, worst margin {rep.worst_margin:.3e}, "
                  f"violations={violations}, excluded={len(rep.details)}")
    assert ok


def test_08_cost_controllability():
    rep = certify.cost_controllability(P, n_samples=200, seed=0)
    ub = certify.check_uniform_bound(P, n_samples=200, seed=0)
    ok = math.isfinite(rep.values["rho_emp"]) and rep.passed and ub.worst_margin >= -1e-8
    record(8, ok, f"rho_emp={rep.values['rho_emp']:.4g} (bound {rep.values['rho_bound']:.4g}); "
                  f"C - J_inf worst margin {ub.worst_margin:.3e} over {ub.n_samples} samples")
    assert ok


def test_09_gradient():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        lam = rng.uniform(0.05, 0.95)
        x = rng.uniform([0.1, 0.0, 0.0], [0.8, 0.2, 0.05])
        x = x / max(1.0, x.sum())
        T = 0.25 * rng.integers(1, 21)
        spec = OcpSpec(x, T, P.replace(lam=lam))
        u = rng.uniform(P.u_lower, P.u_upper, size=(spec.M, 2))
        fd = fd_gradient(lambda v: objective(spec, v), u)
        worst = max(worst, np.abs(gradient(spec, u) - fd).max() / max(np.abs(fd).max(), 1e-12))
    ok = worst <= 1e-5
    record(9, ok, f"adjoint vs central differences, 50 instances (T <= 5): max rel err {worst:.2e}")
    assert ok


def test_10_integrators():
    e = simulate(X0_STUDY, Constant(P.u_nom), 300, P, h=0.25, method="euler")
    r = simulate(X0_STUDY, Constant(P.u_nom), 300, P, h=0.25, method="rk4")
    gap = float(np.abs(e.states - r.states).max())
    fine = simulate(X0_STUDY, Constant(P.u_nom), 300, P, h=0.001, method="rk4")
    self_gap = float(np.abs(r.states - fine.states[::250]).max())
    ok = gap <= 1e-2 and self_gap <= 1e-6
    record(10, ok, f"Euler vs RK4 (h=0.25, 300 d) gap {gap:.3e}; RK4 h=0.25 vs h=0.001 gap {self_gap:.3e}")
    assert ok


def test_11_lattice_oracle():
    rng = np.random.default_rng(11)
    worst, checked = -math.inf, 0
    for _ in range(20):
        q = P.replace(lam=rng.uniform(0.05, 0.95))
        x = rng.uniform([0.2, 0.0, 0.02], [0.8, 0.25, 0.05])
        x = x / max(1.0, x.sum())
        M = int(rng.integers(1, 4))
        best = lattice_best(x, M, q, 0.25)
        sol = solve(OcpSpec(x, 0.25 * M, q))
        if best is None:
            continue
        checked += 1
        gap = math.inf if sol.status == INFEASIBLE else sol.cost - best
        worst = max(worst, gap)
    ok = checked > 0 and worst <= 1e-6
    record(11, ok, f"{checked} instances with a feasible lattice point: max(solve - lattice best) = {worst:.3e}")
    assert ok
