import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfprice.errors import DivergenceError, PreconditionError
from mfprice.lattice import discrete_bmo
from mfprice.meanfield import (GammaConstants, contraction_measure, driver_meanfield, gamma_map,
                               solve_additive, solve_backward_sweep, solve_fixed_point)
from mfprice.model import AgentType, LiabilitySpec, PopulationLaw

from conftest import terminal, tree, two_atom_population


def additive_population(common_amp=0.03, idio_amp=0.02, gammas=(1.0, 2.0), weights=(0.4, 0.6)):
    atoms = tuple((w, AgentType(0.0, g, LiabilitySpec.additive(
        lambda w0: common_amp * np.tanh(terminal(w0)), lambda w1: idio_amp * np.sign(terminal(w1)),
        g, common_amp, idio_amp))) for w, g in zip(weights, gammas))
    return PopulationLaw(atoms, min(gammas), max(gammas))


def test_constants():
    c = GammaConstants(1.0, 1.0, 1.0, 0.04)
    assert c.C_gamma == 1.0 and c.c_gamma == 1.5
    assert c.threshold == pytest.approx(0.0589255, abs=1e-7)
    assert c.R == pytest.approx(np.sqrt(2) * 0.04)
    assert c.in_theory
    assert not GammaConstants(1.0, 1.0, 1.0, 0.1).in_theory


def test_driver_reduces_to_agent_driver():
    # with zbar = -theta/gh the mean-field driver is the agent driver
    from mfprice.bsde import driver_agent
    rng = np.random.default_rng(0)
    z0, z1, th = rng.normal(size=2), rng.normal(size=1), rng.normal(size=2)
    sigma = np.array([[1.0, 0.5]])
    gh, g = 1.3, 2.0
    from mfprice.model import projector
    P = projector(sigma)
    th = P @ th
    a = driver_meanfield(z0, z1, -th / gh, g, gh, sigma=sigma)
    b = driver_agent(z0, z1, th, g, sigma=sigma)
    assert a == pytest.approx(b, abs=1e-14)


def test_zero_liability_converges_immediately(market):
    pop = PopulationLaw.single(AgentType(0, 1.0, LiabilitySpec.constant(0.0)))
    mf = solve_fixed_point(tree(3), market, pop)
    assert mf.iterations == 1
    assert all(np.all(t == 0) for t in mf.theta_mfg)


def test_picard_matches_sweep(market):
    lat = tree(5)
    pop = two_atom_population(0.04)
    a = solve_fixed_point(lat, market, pop, tol=1e-13)
    b = solve_backward_sweep(lat, market, pop)
    assert a.iterations <= lat.steps + 1
    for x, y in zip(a.representative.Y, b.representative.Y):
        np.testing.assert_allclose(x, y, atol=1e-14)


def test_additive_paths_agree(market):
    lat = tree(5)
    pop = additive_population()
    a = solve_fixed_point(lat, market, pop, tol=1e-13)
    s = solve_additive(lat, market, pop)
    c = solve_additive(lat, market, pop, method="closed_form")
    for x, y in zip(a.theta_mfg, s.theta_mfg):
        np.testing.assert_allclose(x, y, atol=1e-14)
    for x, y in zip(c.theta_mfg, s.theta_mfg):
        np.testing.assert_allclose(x, y, atol=1e-5)


def test_additive_requires_structure(market):
    with pytest.raises(PreconditionError):
        solve_additive(tree(2), market, two_atom_population())


def test_additive_common_part_must_agree(market):
    g = (1.0, 2.0)
    atoms = tuple((0.5, AgentType(0, gi, LiabilitySpec.additive(
        lambda w0, s=gi: s * 0.01 * terminal(w0), lambda w1: 0 * terminal(w1), gi, 1.0, 0.0)))
        for gi in g)
    with pytest.raises(PreconditionError):
        solve_additive(tree(2), market, PopulationLaw(atoms, 1.0, 2.0))


def test_divergence_reports_ratios(market):
    with pytest.raises(DivergenceError) as exc:
        solve_fixed_point(tree(4), market, two_atom_population(0.5), tol=1e-14, max_iter=2)
    assert len(exc.value.ratios) == 2


def test_gamma_map_is_linear_solve_for_frozen_input(market):
    lat = tree(3)
    pop = two_atom_population(0.04)
    zero = ([np.zeros((2,) + lat.shape(k) + (1,)) for k in range(3)],
            [np.zeros((2,) + lat.shape(k) + (1,)) for k in range(3)])
    out = gamma_map(lat, market, pop, zero)
    # zero driver: Y is the conditional expectation of F
    F = lat.terminal_values(pop.agents[0].liability)
    assert out.Y[0][0, 0, 0] == pytest.approx(F.mean(), abs=1e-15)


@given(st.integers(0, 2 ** 32 - 1))
def test_contraction_bound_in_ball(seed):
    from mfprice.model import MarketModel
    market = MarketModel.constant(np.array([[1.0]]))
    lat = tree(3)
    pop = two_atom_population(0.04)
    c = GammaConstants.from_population(pop)
    rng = np.random.default_rng(seed)

    def random_input():
        z0 = [rng.normal(size=(2,) + lat.shape(k) + (1,)) for k in range(3)]
        z1 = [rng.normal(size=(2,) + lat.shape(k) + (1,)) for k in range(3)]
        s = c.R / np.sqrt(discrete_bmo(lat, z0, z1)) * rng.uniform(0.1, 1.0)
        return [s * z for z in z0], [s * z for z in z1]

    ratio, bound = contraction_measure(lat, market, pop, random_input(), random_input())
    assert ratio <= bound
    assert bound < 1.0
