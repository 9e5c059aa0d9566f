import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfprice.bsde import (driver_agent, measurability, optimal_strategy, shift_invariance_check,
                          solve_agent_bsde, solve_agent_bsde_qmeasure, solve_closed_form,
                          solve_quadratic_scheme, theta_path)
from mfprice.errors import PreconditionError, StepSizeError, ValidationError
from mfprice.model import AgentType, LiabilitySpec, MarketModel

from conftest import terminal, tree


def test_driver_agent_examples():
    # zero integrands: only the premium cost remains
    assert driver_agent([0.0], [0.0], [0.2], 2.0) == pytest.approx(-0.01)
    # with sigma of rank n < d0 the perpendicular part is penalized
    sigma = np.array([[1.0, 0.0]])
    f = driver_agent([0.0, 1.0], [0.0], [0.0, 0.0], 2.0, sigma=sigma)
    assert f == pytest.approx(1.0)


def test_one_step_log_cosh():
    lat = tree(1)
    G = np.broadcast_to(lat.eps1[:, 0][None, :], lat.shape(1))
    y = solve_closed_form(lat, G)
    assert y[0][0, 0] == pytest.approx(np.log(np.cosh(1.0)), abs=1e-12)


def test_closed_form_rejects_mixed():
    lat = tree(2)
    F = lat.terminal_values(LiabilitySpec.mixed_sign(1.0))
    assert measurability(lat, F) == "mixed"
    with pytest.raises(PreconditionError):
        solve_closed_form(lat, F)


def test_measurability_classes():
    lat = tree(2)
    assert measurability(lat, np.zeros(lat.shape(2))) == "constant"
    assert measurability(lat, lat.terminal_values(LiabilitySpec.common_sign(1.0))) == "common"
    assert measurability(lat, lat.terminal_values(LiabilitySpec.idio_sign(1.0))) == "idio"


def test_deterministic_theta(market):
    lat = tree(4)
    agent = AgentType(0.0, 2.0, LiabilitySpec.constant(0.0))
    sol = solve_agent_bsde(lat, market, agent, 0.2)
    assert sol.y0 == pytest.approx(-0.01, abs=1e-15)
    st_ = optimal_strategy(sol, 0.2, 2.0, market)
    for p in st_.p:
        np.testing.assert_allclose(p, 0.1, atol=1e-15)


def test_common_linear_liability_is_hedged(market):
    # F = a W0_T: Z0 = a, p* = a + theta/gamma, Y0 = -a theta T - theta^2 T/(2 gamma)
    lat = tree(3)
    a, th, g = 0.1, 0.2, 2.0
    agent = AgentType(0.0, g, LiabilitySpec.common(lambda w: a * terminal(w), 1.0))
    sol = solve_agent_bsde(lat, market, agent, th)
    assert sol.y0 == pytest.approx(-a * th - th ** 2 / (2 * g), abs=1e-14)
    for p in optimal_strategy(sol, th, g, market).p:
        np.testing.assert_allclose(p, a + th / g, atol=1e-14)


def test_idio_liability_matches_scheme_recursion(market):
    lat = tree(3)
    g = 1.5
    agent = AgentType(0.0, g, LiabilitySpec.idio(lambda w: 0.2 * np.tanh(terminal(w)), 0.2))
    sol = solve_agent_bsde(lat, market, agent, 0.0)
    y, _, _ = solve_quadratic_scheme(lat, g * lat.terminal_values(agent.liability))
    np.testing.assert_allclose(g * sol.Y[0], y[0], atol=1e-15)


def test_liability_bound_checked(market):
    lat = tree(2)
    bad = LiabilitySpec.common(lambda w: 2.0 * np.sign(terminal(w)), 1.0)
    with pytest.raises(ValidationError) as exc:
        solve_agent_bsde(lat, market, AgentType(0, 1.0, bad), 0.0)
    assert exc.value.rule == "agent.liability_bound"


def test_theta_checks(market):
    lat = tree(2)
    agent = AgentType(0, 1.0, LiabilitySpec.constant(0.0))
    with pytest.raises(StepSizeError):
        solve_agent_bsde(lat, market, agent, 1.0)
    with pytest.raises(PreconditionError) as exc:
        theta_path(lat, [np.zeros((4, 4, 1)), np.zeros((4, 4, 1))])
    assert exc.value.rule == "theta.adapted"
    m2 = MarketModel.constant(np.array([[1.0, 0.0]]), d=1)
    lat2 = tree(2, d0=2)
    with pytest.raises(PreconditionError) as exc:
        solve_agent_bsde(lat2, m2, agent, [0.0, 0.1])
    assert exc.value.rule == "theta.row_space"


def test_qmeasure_agrees_for_zero_theta(market):
    lat = tree(3)
    agent = AgentType(0, 1.0, LiabilitySpec.mixed_sign(0.3))
    p = solve_agent_bsde(lat, market, agent, 0.0)
    q = solve_agent_bsde_qmeasure(lat, market, agent, 0.0)
    for a, b in zip(p.Y, q.Y):
        np.testing.assert_allclose(a, b, atol=1e-15)


@given(st.floats(-0.3, 0.3), st.floats(0.5, 3.0), st.integers(1, 4))
def test_shift_invariance_random(theta, gamma, K):
    lat = tree(K)
    m = MarketModel.constant(np.array([[1.0]]))
    F = LiabilitySpec.general(lambda w0, w1: 0.3 * np.sin(3 * terminal(w0) - terminal(w1)), 0.3)
    rep = shift_invariance_check(lat, m, AgentType(0.7, gamma, F), theta)
    assert rep.max_abs_dp <= 1e-12
    assert rep.y0_gap_error <= 1e-12


def test_stochastic_vol_positions(market):
    m = MarketModel.constant(np.array([[0.5]]), vol_amplitude=0.4)
    lat = tree(3)
    agent = AgentType(0, 1.0, LiabilitySpec.constant(0.0))
    st_ = optimal_strategy(solve_agent_bsde(lat, m, agent, 0.2), 0.2, 1.0, m)
    for k, (p, pi) in enumerate(zip(st_.p, st_.pi)):
        sig = lat.sigma(m, k)[:, 0, 0]
        np.testing.assert_allclose(pi[..., 0] * sig[:, None], p[..., 0], atol=1e-14)
