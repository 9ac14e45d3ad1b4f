import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import X0_STUDY
from seir_mpc.errors import DomainError
from seir_mpc.integrate import (
    Constant,
    Feedback,
    PiecewiseConstant,
    Trajectory,
    simulate,
    simulate_batch,
    step_euler,
    step_rk4,
)
from seir_mpc.model import ModelParams, in_XM

P = ModelParams()


def test_euler_step_example():
    y = step_euler(X0_STUDY, P.u_nom, 0.25, P)
    np.testing.assert_allclose(y, [0.49945, 0.18 + 0.25 * (0.0022 - 0.18 / 4.6), 0.01 + 0.25 * (0.18 / 4.6 - 0.01 / 6.5)], atol=1e-16)
    np.testing.assert_allclose(y, [0.499450, 0.1707674, 0.0193980], atol=1e-7)


@pytest.mark.parametrize("step", [step_euler, step_rk4])
def test_fixed_point(step):
    assert np.array_equal(step([0.5, 0, 0], [0.3, 0.4], 0.25, P), [0.5, 0, 0])


def test_rk4_self_convergence():
    coarse = simulate(X0_STUDY, Constant(P.u_nom), 100, P, h=0.25, method="rk4")
    fine = simulate(X0_STUDY, Constant(P.u_nom), 100, P, h=0.001, method="rk4")
    gap = np.abs(coarse.states - fine.states[::250]).max()
    assert gap < 1e-6


def test_euler_rk4_gap():
    e = simulate(X0_STUDY, Constant(P.u_nom), 300, P, h=0.25, method="euler")
    r = simulate(X0_STUDY, Constant(P.u_nom), 300, P, h=0.25, method="rk4")
    assert np.abs(e.states - r.states).max() <= 1e-2


def test_euler_rk4_order():
    # the Euler error halves with h (first order)
    ref = simulate(X0_STUDY, Constant(P.u_nom), 20, P, h=0.01, method="rk4").states[-1]
    errs = [np.abs(simulate(X0_STUDY, Constant(P.u_nom), 20, P, h=h).states[-1] - ref).max() for h in (0.2, 0.1, 0.05)]
    ratios = [errs[k] / errs[k + 1] for k in range(2)]
    assert all(1.7 < r < 2.3 for r in ratios)


def test_simulate_nominal_from_XM():
    tr = simulate([0.3, 0.01, 0.01], Constant(P.u_nom), 300, P)
    assert all(in_XM(x, P, tol=1e-12) for x in tr.states)
    assert max(tr.final_state[1:]) < 1e-8 or max(tr.final_state[1:]) < tr.states[0, 1:].max()
    assert tr.t_enter_XM == 0.0 and tr.t_violation is None


def test_simulate_equilibrium_constant():
    tr = simulate([0.2, 0, 0], Feedback(lambda x: [0.3, 0.3]), 10, P)
    assert np.all(tr.states == [0.2, 0, 0])


def test_maximal_intervention_enters_XA():
    tr = simulate(X0_STUDY, Constant(P.u_max_intervention), 100, P)
    assert tr.t_enter_XA is not None
    assert tr.states[:, 2].max() <= P.i_max


def test_simulate_errors():
    with pytest.raises(DomainError):
        simulate(X0_STUDY, Constant([0.1, 0.2]), 1, P)
    with pytest.raises(DomainError):
        simulate(X0_STUDY, Constant(P.u_nom), 0.3, P)
    with pytest.raises(DomainError):
        simulate(X0_STUDY, PiecewiseConstant([P.u_nom], 0.25), 1.0, P)


def test_piecewise_constant_offset_and_tail():
    sig = PiecewiseConstant([[0.3, 0.2], [0.4, 0.3]], 0.5, tail=P.u_nom, t0=10.0)
    assert np.array_equal(sig(10.25, None), [0.3, 0.2])
    assert np.array_equal(sig(10.5, None), [0.4, 0.3])
    assert np.array_equal(sig(11.0, None), P.u_nom)


def test_trajectory_concatenate_and_cost():
    a = simulate(X0_STUDY, Constant(P.u_nom), 1, P)
    b = simulate(a.final_state, Constant(P.u_nom), 1, P, t0=1.0)
    c = simulate(X0_STUDY, Constant(P.u_nom), 2, P)
    ab = Trajectory.concatenate([a, b])
    np.testing.assert_array_equal(ab.states, c.states)
    assert ab.cost_integral() == pytest.approx(c.cost_integral(), rel=1e-15)
    with pytest.raises(ValueError):
        Trajectory(times=np.zeros(2), states=np.zeros((2, 3)), inputs=np.zeros((0, 2)), cost_samples=np.zeros(0))


def test_batch_matches_single():
    X0 = np.array([X0_STUDY, [0.3, 0.01, 0.01]])
    out = simulate_batch(X0, lambda k, X: np.tile(P.u_nom, (len(X), 1)), 40, 0.25, P)
    single = simulate([0.3, 0.01, 0.01], Constant(P.u_nom), 10, P)
    np.testing.assert_allclose(out[:, 1], single.states, atol=1e-16)


@given(
    st.floats(0.0, 1.0), st.floats(0.0, 0.3), st.floats(0.0, 0.05),
    st.lists(st.tuples(st.floats(0.22, 0.44), st.floats(1 / 6.5, 0.5)), min_size=1, max_size=40),
)
def test_susceptible_monotone_and_nonnegative(s, e, i, us):
    tot = s + e + i
    x = np.array([s, e, i]) / max(tot, 1.0)
    tr = simulate(x, PiecewiseConstant(us, 0.25), 0.25 * len(us), P)
    assert np.all(np.diff(tr.states[:, 0]) <= 1e-15)
    assert np.all(tr.states >= 0.0)
