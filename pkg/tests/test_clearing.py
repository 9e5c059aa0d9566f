import warnings

import numpy as np
import pytest

from mfprice.bsde import optimal_strategy, solve_agent_bsde
from mfprice.clearing import (atom_positions, clearing_sweep, exact_clearing_error, finite_n_theta,
                              fit_rate, sample_finite_n_theta, simulate_clearing)
from mfprice.errors import PreconditionError
from mfprice.meanfield import solve_fixed_point
from mfprice.model import AgentType, LiabilitySpec, PopulationLaw

from conftest import tree, two_atom_population


@pytest.fixture(scope="module")
def hetero():
    from mfprice.model import MarketModel
    m = MarketModel.constant(np.array([[1.0]]))
    lat = tree(5)
    pop = two_atom_population(0.04)
    return lat, m, pop, solve_fixed_point(lat, m, pop)


def test_aggregate_mean_position_vanishes(hetero):
    lat, m, pop, mf = hetero
    pos = atom_positions(lat, m, pop, mf.theta_mfg)
    for pi in pos.pi:
        mean = np.tensordot(pos.weights, pi, axes=(0, 0)).mean(axis=1)
        np.testing.assert_allclose(mean, 0.0, atol=1e-16)


def test_mc_agrees_with_exact(hetero):
    lat, m, pop, mf = hetero
    pos = atom_positions(lat, m, pop, mf.theta_mfg)
    for N in (2, 32):
        est, se = simulate_clearing(lat, m, pop, mf.theta_mfg, N, 3000, seed=5, positions=pos)
        assert abs(est - exact_clearing_error(lat, pos, N)) < 4 * se


def test_seed_change_within_three_stderr(hetero):
    lat, m, pop, mf = hetero
    a = simulate_clearing(lat, m, pop, mf.theta_mfg, 16, 3000, seed=1)
    b = simulate_clearing(lat, m, pop, mf.theta_mfg, 16, 3000, seed=2)
    assert abs(a[0] - b[0]) < 3 * np.hypot(a[1], b[1])


def test_thread_count_invariance(hetero):
    lat, m, pop, mf = hetero
    a = simulate_clearing(lat, m, pop, mf.theta_mfg, 16, 1000, seed=1, threads=1)
    b = simulate_clearing(lat, m, pop, mf.theta_mfg, 16, 1000, seed=1, threads=3)
    assert a == b


def test_n_one_is_single_agent_integral(market):
    lat = tree(3)
    agent = AgentType(0, 1.0, LiabilitySpec.idio_sign(0.2))
    pop = PopulationLaw.single(agent)
    theta = [np.full((lat.n_common(k), 1), 0.1) for k in range(3)]
    sol = solve_agent_bsde(lat, market, agent, theta)
    pi = optimal_strategy(sol, theta, 1.0, market).pi
    direct = sum(float(np.mean(p ** 2)) * lat.dt for p in pi)
    pos = atom_positions(lat, market, pop, theta)
    assert exact_clearing_error(lat, pos, 1) == pytest.approx(direct, rel=1e-14)


def test_decreasing_in_n(hetero):
    lat, m, pop, mf = hetero
    est = [simulate_clearing(lat, m, pop, mf.theta_mfg, N, 2000, seed=0)[0] for N in (2, 8, 32)]
    assert est[0] > est[1] > est[2] > 0


def test_symmetric_sweep_degenerate(market):
    lat = tree(4)
    pop = PopulationLaw.single(AgentType(0, 1.5, LiabilitySpec.common_sign(0.04)))
    mf = solve_fixed_point(lat, market, pop)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        rep = clearing_sweep(lat, market, pop, mf.theta_mfg, [1, 4, 16], 300)
    assert rep.slope is None and rep.warning
    assert any(issubclass(x.category, RuntimeWarning) for x in w)
    assert max(rep.estimates) <= 1e-20


def test_sweep_preconditions(hetero):
    lat, m, pop, mf = hetero
    with pytest.raises(PreconditionError):
        clearing_sweep(lat, m, pop, mf.theta_mfg, [4, 8, 16], 10)
    with pytest.raises(PreconditionError):
        clearing_sweep(lat, m, pop, mf.theta_mfg, [16, 4, 256], 10)


def test_fit_rate_exact():
    N = np.array([4, 16, 64])
    slope, intercept = fit_rate(N, 3.0 / N)
    assert slope == pytest.approx(-1.0) and intercept == pytest.approx(np.log(3.0))


def test_intercept_grows_with_heterogeneity(market):
    lat = tree(4)
    out = []
    for amp in (0.02, 0.04):
        pop = two_atom_population(amp)
        mf = solve_fixed_point(lat, market, pop)
        out.append(clearing_sweep(lat, market, pop, mf.theta_mfg, [4, 16, 64], 2000, seed=3))
    assert out[1].intercept > out[0].intercept
    assert abs(out[1].slope - out[0].slope) < 0.2


def test_finite_n_theta_common_only(market):
    lat = tree(4)
    pop = PopulationLaw.single(AgentType(0, 1.5, LiabilitySpec.common(lambda w: 0.1 * np.tanh(w[..., -1, 0]), 0.1)))
    mf = solve_fixed_point(lat, market, pop)
    for N in (1, 5):
        f = sample_finite_n_theta(lat, mf, pop, 2, N, replicates=10)
        assert f.idio_variation == 0.0
        np.testing.assert_allclose(f.theta, np.broadcast_to(mf.theta_mfg[2], f.theta.shape), atol=1e-16)


def test_finite_n_theta_idio_dependence_and_rate(hetero):
    lat, m, pop, mf = hetero
    assert sample_finite_n_theta(lat, mf, pop, 3, 1, replicates=20).idio_variation > 0
    rms = [sample_finite_n_theta(lat, mf, pop, 3, N, 400, seed=1, redraw_atoms=True).rms_error(mf.theta_mfg[3])
           for N in (8, 64, 512)]
    rates = np.diff(np.log(rms)) / np.log(8)
    assert np.all(np.abs(rates + 0.5) < 0.15)


def test_finite_n_theta_formula():
    z = np.array([[[[1.0], [3.0]]], [[[2.0], [2.0]]]])          # (N=2, nc=1, ni=2, 1)
    f = finite_n_theta(z, np.array([1.0, 2.0]), np.array([[0, 0], [1, 1]]))
    gh = 1.0 / 0.75
    np.testing.assert_allclose(f.theta[:, 0, 0], [-gh * 1.5, -gh * 2.5])
    assert f.idio_variation == pytest.approx(gh)
