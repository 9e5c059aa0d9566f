import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfprice.errors import ConfigError, StepSizeError
from mfprice.lattice import (PathEnsemble, backward_expectation, backward_expectation_tilted,
                             conditional_mean_common, discrete_bmo, tilted_probabilities)
from mfprice.model import LiabilitySpec, TimeGrid

from conftest import tree


def test_shapes_and_states():
    lat = tree(3, d0=2, d=1)
    assert lat.shape(2) == (16, 4)
    w = lat.common_states(3)
    assert w.shape == (64, 2)
    # every node value is a sum of k increments of size sqrt(dt)
    np.testing.assert_allclose(np.abs(w).max(), 3 * lat.sqdt)
    paths = lat.common_paths()
    np.testing.assert_array_equal(paths[:, -1], w)
    np.testing.assert_array_equal(paths[:, 0], 0.0)


def test_node_budget():
    with pytest.raises(ConfigError):
        tree(14, d0=1, d=1).shape(0)


@given(st.integers(1, 4), st.integers(0, 3))
def test_brownian_martingale_and_increment(K, k_off):
    lat = tree(K)
    k = min(k_off, K - 1)
    w0 = np.broadcast_to(lat.common_states(k + 1)[:, 0][:, None], lat.shape(k + 1))
    mean, z0, z1 = backward_expectation(lat, w0, k)
    np.testing.assert_allclose(mean, np.broadcast_to(lat.common_states(k)[:, 0][:, None], lat.shape(k)),
                               atol=1e-14)
    np.testing.assert_allclose(z0[..., 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(z1, 0.0, atol=1e-14)


def test_quadratic_variation_compensator():
    lat = tree(2)
    w1 = np.broadcast_to(lat.idio_states(2)[:, 0][None, :], lat.shape(2))
    mean, _, _ = backward_expectation(lat, w1 ** 2, 1)
    prev = np.broadcast_to(lat.idio_states(1)[:, 0][None, :], lat.shape(1))
    np.testing.assert_allclose(mean - prev ** 2, lat.dt, atol=1e-14)


def test_tilted_probabilities_mean_drift():
    lat = tree(4)
    theta = np.array([[0.3]])
    q = tilted_probabilities(lat, theta, 0)
    np.testing.assert_allclose(q.sum(axis=1), 1.0)
    # exponential tilt: E_Q[dW] = -tanh(theta sqrt dt) sqrt dt
    drift = (q @ lat.eps0)[0, 0] * lat.sqdt
    assert drift == pytest.approx(-np.tanh(0.3 * lat.sqdt) * lat.sqdt, abs=1e-15)
    with pytest.raises(StepSizeError):
        tilted_probabilities(lat, np.array([[2.0]]), 0)


def test_tilted_regression_recovers_slope():
    lat = tree(2)
    q = tilted_probabilities(lat, np.array([[0.4], [-0.2]]), 1)
    v = 3.0 * np.broadcast_to(lat.common_states(2)[:, 0][:, None], lat.shape(2))
    _, z0, _ = backward_expectation_tilted(lat, v, 1, q)
    np.testing.assert_allclose(z0[..., 0], 3.0, atol=1e-12)


def test_conditional_mean_common_weights():
    x = np.arange(24, dtype=float).reshape(2, 3, 4)
    out = conditional_mean_common(None, x, weights=np.array([0.25, 0.75]))
    np.testing.assert_allclose(out, (0.25 * x[0] + 0.75 * x[1]).mean(axis=1))


def test_discrete_bmo_constant_integrand():
    lat = tree(3)
    z0 = [np.full(lat.shape(k) + (1,), 0.5) for k in range(3)]
    z1 = [np.zeros(lat.shape(k) + (1,)) for k in range(3)]
    assert discrete_bmo(lat, z0, z1) == pytest.approx(0.25 * 1.0)


def test_ensemble_is_deterministic_and_keyed():
    g = TimeGrid(1.0, 5)
    a = PathEnsemble(g, 1, 1, 8, 16, seed=3)
    b = PathEnsemble(g, 1, 1, 8, 16, seed=3)
    c = PathEnsemble(g, 1, 1, 4, 16, seed=3)
    np.testing.assert_array_equal(a.common, b.common)
    np.testing.assert_array_equal(a.common[:4], c.common)     # substream per outer path
    F = a.evaluate(LiabilitySpec.mixed_sign(1.0))
    assert F.shape == (8, 16)
    assert a.conditional_mean_common(F).shape == (8,)


def test_ensemble_increment_statistics():
    e = PathEnsemble(TimeGrid(1.0, 4), 1, 1, 2000, 1, seed=0)
    var = e.common[:, -1, 0].var()
    assert var == pytest.approx(1.0, abs=0.1)
