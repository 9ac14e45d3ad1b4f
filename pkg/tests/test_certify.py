import math

import numpy as np
import pytest

from conftest import X0_STUDY
from seir_mpc import certify
from seir_mpc.errors import DomainError
from seir_mpc.model import ModelParams, _rhs, in_X, in_XM
from seir_mpc.mpc import MpcLog, MpcRecord
from seir_mpc.ocp import value_T

P = ModelParams()
B = P.bounds


def test_lie_derivative_examples():
    d = certify.lie_derivatives_on_XM_boundary([B.xbar1, 0.01, 0.01], P.u_nom, P)
    assert set(d) == {"g1"}
    assert d["g1"] == pytest.approx(-P.gamma_nom * 0.01, rel=1e-14)
    d = certify.lie_derivatives_on_XM_boundary([0.2, B.xbar2, P.i_max], P.u_nom, P)
    assert set(d) == {"g2", "g3"}
    assert abs(d["g3"]) <= 1e-15
    with pytest.raises(DomainError):
        certify.lie_derivatives_on_XM_boundary([0.2, 0.01, 0.01], P.u_nom, P)


def test_lie_boundary_mesh():
    rep = certify.check_lie_boundary(P, inputs="nominal")
    assert rep.passed and rep.values["mesh_points"] >= 1000
    assert rep.worst_margin >= -1e-12


def test_xm_invariance_small():
    rep = certify.check_XM_invariance(P, n_samples=100, horizon=100)
    assert rep.passed and rep.values["exits"] == 0


def test_xm_invariance_negative_control_is_out_of_domain():
    outside = [B.xbar1 + 0.01, 0.03, 0.049]
    rep = certify.check_XM_invariance(P, horizon=100, x0s=[outside, [0.3, 0.01, 0.01]])
    assert rep.passed and rep.values["out_of_domain"] == 1
    assert any("out-of-domain" in d for d in rep.details)


def test_uniform_bound_examples():
    zero = certify.uniform_bound_C([0.2, 0, 0], P)
    assert zero.C == 0.0 and zero.J_inf == 0.0
    ub = certify.uniform_bound_C([0.3, 0.01, 0.01], P)
    assert ub.J_inf <= ub.C
    # C grows with the initial infection at fixed S0 and S_inf
    s0, s_inf = 0.3, ub.x1_inf
    c = [P.lam * ((s0 - s_inf + e) / P.eta + (s0 - s_inf + e + i) / P.gamma_nom) for e, i in ((0.01, 0.01), (0.02, 0.01), (0.02, 0.02))]
    assert c[0] < c[1] < c[2]
    with pytest.raises(DomainError):
        certify.uniform_bound_C(X0_STUDY, P)


def test_decay_fit_envelope():
    rng = np.random.default_rng(0)
    X0 = certify.sample_XM(P, 30, rng)
    fit = certify.estimate_decay(P, x0s=X0, horizon=400)
    assert fit.Gamma >= 1.0 and fit.rate > 0
    from seir_mpc.integrate import simulate_batch
    traj = simulate_batch(X0, lambda k, X: np.broadcast_to(P.u_nom, (len(X), 2)), 1600, 0.25, P)
    n = np.hypot(traj[..., 1], traj[..., 2])
    t = 0.25 * np.arange(1601)[:, None]
    assert np.all(n <= fit.Gamma * np.exp(-fit.rate * t) * n[0] * (1 + 1e-12))
    with pytest.raises(DomainError):
        certify.estimate_decay(P, n_samples=5)


def test_cost_controllability_small():
    rep = certify.cost_controllability(P, n_samples=40)
    assert rep.passed
    assert math.isfinite(rep.values["rho_emp"])
    assert rep.values["rho_emp"] <= rep.values["rho_bound"]


def test_negative_control_ratio_grows():
    r = certify.cost_ratio_outside_XM(P, scales=(1e-2, 5e-3, 2e-3))
    assert np.all(np.diff(r) > 0)


def test_holding_feedback():
    x = np.array([0.6, 0.03, 0.03])
    u = certify.holding_feedback(x, P)
    assert P.beta_min < u[0] < P.beta_nom and P.gamma_nom < u[1] < P.gamma_max
    f = _rhs(x, u, P)
    assert abs(f[1]) <= 1e-12 and abs(f[2]) <= 1e-12
    assert certify.holding_feedback([0.4, 0.2, 0.01], P)[1] == P.gamma_max
    assert np.array_equal(certify.holding_feedback([0.4, 0.1, 1e-15], P), P.u_nom)


def test_staged_reach_from_study_state():
    traj, t_reach = certify.staged_reach_XM(X0_STUDY, P)
    assert math.isfinite(t_reach) and t_reach > 0
    assert in_XM(traj.final_state, P)
    assert traj.states[:, 2].max() <= P.i_max
    assert all(in_X(x, P) for x in traj.states)
    # holding phase: beta rises to nominal before gamma falls to nominal
    hold = traj.inputs[traj.times[:-1] >= traj.meta["t_phase1"]]
    b_done = np.flatnonzero(hold[:, 0] >= P.beta_nom - 1e-15)
    g_done = np.flatnonzero(hold[:, 1] <= P.gamma_nom + 1e-15)
    assert b_done.size and (g_done.size == 0 or g_done[0] >= b_done[0])
    assert np.all(np.diff(hold[: b_done[0] + 1, 0]) >= -1e-15)


def test_staged_reach_trivial_and_upper_bound():
    _, t = certify.staged_reach_XM([0.3, 0.01, 0.01], P)
    assert t == 0.0
    rep = certify.check_staged(X0_STUDY, P, horizons=(2.0, 5.0))
    assert rep.passed


def test_gronwall_constant():
    assert certify.gronwall_constant(20, P) == math.exp(20.0)
    assert certify.gronwall_constant(20, P) == pytest.approx(4.8517e8, rel=1e-4)
    assert certify.gronwall_constant(1, P.replace(gamma_max=0.2)) == math.exp(2 * P.eta)


def test_a3_small_and_equilibrium():
    rep = certify.check_A3(P, T=5, samples=[[0.2, 0, 0], X0_STUDY], deltas=(0.25, 1.0, 5.0))
    assert rep.passed and rep.n_samples == 6
    assert value_T([0.2, 0, 0], 1.0, P) == 0.0
    with pytest.raises(DomainError):
        certify.check_A3(P, T=5, samples=[X0_STUDY], deltas=(6.0,))


def _record(k, V, V_next, integral):
    return MpcRecord(iteration=k, t=float(k), state=np.zeros(3), V_T=V, inputs=np.empty((0, 2)),
                     stage_integral=integral, status="converged", kkt_residual=0.0,
                     constraint_violation=0.0, wall_time=0.0, V_T_next=V_next)


def test_lyapunov_monitor():
    log = MpcLog([_record(0, 1.0, 0.8, 0.4), _record(1, 0.8, 0.7, 0.2), _record(2, 1e-20, 0.0, 1e-16)])
    rep = certify.lyapunov_monitor(log)
    assert rep.values["alpha_max"] == pytest.approx(0.5)
    assert rep.passed
    bad = certify.lyapunov_monitor(MpcLog([_record(0, 1.0, 1.1, 0.1)]))
    assert not bad.passed
    empty = certify.lyapunov_monitor(MpcLog())
    assert empty.passed and empty.values["alpha_max"] == -math.inf
