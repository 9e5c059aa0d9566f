"""Discrete noise engines.

``NoiseLattice`` is a non-recombining product tree: at every step each of the
``d0`` common and ``d`` idiosyncratic coordinates moves by +-sqrt(dt) with
probability 1/2, independently. Values at step ``k`` are stored as arrays
``(..., n_common(k), n_idio(k))`` in C order; child ``b`` of common node ``c``
has index ``c * B0 + b`` (likewise for the idiosyncratic axis), so the flat
node id is plain stride arithmetic.

``PathEnsemble`` is the Monte Carlo counterpart with Gaussian increments and
``M_idio`` inner particles per outer common path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, StepSizeError
from .model import TimeGrid


def _sign_patterns(dim: int) -> np.ndarray:
    """All 2**dim vectors of +-1, bit j of the branch index gives coordinate j."""
    b = np.arange(2 ** dim)
    bits = (b[:, None] >> np.arange(dim)[None, :]) & 1
    return (2.0 * bits - 1.0).reshape(2 ** dim, dim)


def _states(eps: np.ndarray, sqdt: float, steps: int) -> list:
    """Brownian values at every node, per step: list of (B**k, dim) arrays."""
    branches, dim = eps.shape
    out = [np.zeros((1, dim))]
    for _ in range(steps):
        prev = out[-1]
        out.append((prev[:, None, :] + sqdt * eps[None, :, :]).reshape(prev.shape[0] * branches, dim))
    return out


@dataclass(frozen=True)
class NoiseLattice:
    grid: TimeGrid
    d0: int = 1
    d: int = 1
    max_nodes: int = 2 ** 26

    def __post_init__(self):
        if self.d0 < 1 or self.d < 0:
            raise ConfigError("need d0 >= 1 and d >= 0", "market")
        if self.n_common(self.steps) * self.n_idio(self.steps) > self.max_nodes:
            raise ConfigError(
                f"tree with K={self.steps}, d0={self.d0}, d={self.d} exceeds "
                f"{self.max_nodes} terminal nodes", "grid.K")

    # sizes ---------------------------------------------------------------
    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def sqdt(self) -> float:
        return float(np.sqrt(self.grid.dt))

    @property
    def b0(self) -> int:
        return 2 ** self.d0

    @property
    def b1(self) -> int:
        return 2 ** self.d

    def n_common(self, k: int) -> int:
        return self.b0 ** k

    def n_idio(self, k: int) -> int:
        return self.b1 ** k

    def shape(self, k: int) -> tuple:
        return (self.n_common(k), self.n_idio(k))

    def _check_step(self, k: int) -> None:
        if not 0 <= k <= self.steps:
            raise IndexError(f"step {k} outside 0..{self.steps}")

    # increments and states ----------------------------------------------
    @cached_property
    def eps0(self) -> np.ndarray:
        return _sign_patterns(self.d0)

    @cached_property
    def eps1(self) -> np.ndarray:
        return _sign_patterns(self.d)

    @cached_property
    def _common_states(self) -> list:
        return _states(self.eps0, self.sqdt, self.steps)

    @cached_property
    def _idio_states(self) -> list:
        return _states(self.eps1, self.sqdt, self.steps)

    def common_states(self, k: int) -> np.ndarray:
        """W0 at every common node of step ``k``: ``(n_common(k), d0)``."""
        self._check_step(k)
        return self._common_states[k]

    def idio_states(self, k: int) -> np.ndarray:
        self._check_step(k)
        return self._idio_states[k]

    def common_paths(self, k: int | None = None) -> np.ndarray:
        """Full W0 histories ending at step ``k``: ``(n_common(k), k + 1, d0)``."""
        k = self.steps if k is None else k
        self._check_step(k)
        return _paths(self._common_states, self.b0, k)

    def idio_paths(self, k: int | None = None) -> np.ndarray:
        k = self.steps if k is None else k
        self._check_step(k)
        return _paths(self._idio_states, self.b1, k)

    def terminal_values(self, liability) -> np.ndarray:
        """Evaluate a liability on every terminal node: ``(n_common(K), n_idio(K))``."""
        w0 = self.common_paths()[:, None]
        w1 = self.idio_paths()[None, :]
        return np.array(liability(w0, w1), dtype=float)

    def sigma(self, market, k: int) -> np.ndarray:
        return market.sigma(k, self.common_states(k))

    def projectors(self, market, k: int) -> np.ndarray:
        from .model import projector
        return projector(self.sigma(market, k))


def _paths(states: list, branches: int, k: int) -> np.ndarray:
    n = branches ** k
    dim = states[0].shape[1]
    out = np.empty((n, k + 1, dim))
    idx = np.arange(n)
    for j in range(k, -1, -1):
        out[:, j, :] = states[j][idx]
        idx = idx // branches
    return out


# --------------------------------------------------------------------------
# conditional expectations on the tree


def _split(lattice: NoiseLattice, values: np.ndarray, k: int) -> np.ndarray:
    """Reshape step-(k+1) values to (..., n_common(k), B0, n_idio(k), B1)."""
    nc, ni = lattice.shape(k)
    lead = values.shape[:-2]
    if values.shape[-2:] != lattice.shape(k + 1):
        raise ValueError(f"expected trailing shape {lattice.shape(k + 1)}, got {values.shape[-2:]}")
    return values.reshape(lead + (nc, lattice.b0, ni, lattice.b1))


def backward_expectation(lattice: NoiseLattice, values: np.ndarray, k: int):
    """One-step conditional expectation and martingale-increment regression.

    Parameters
    ----------
    values : array (..., n_common(k+1), n_idio(k+1))
        Values at step ``k + 1``; leading axes (atoms, scenarios) are carried.
    k : int
        Parent step.

    Returns
    -------
    mean : (..., n_common(k), n_idio(k))
        ``E[V | node]``.
    z0 : (..., n_common(k), n_idio(k), d0)
        ``E[V dW0] / dt``.
    z1 : (..., n_common(k), n_idio(k), d)
        ``E[V dW1] / dt``.
    """
    if not 0 <= k < lattice.steps:
        raise IndexError(f"step {k} outside 0..{lattice.steps - 1}")
    v = _split(lattice, np.asarray(values, dtype=float), k)
    mean = v.mean(axis=(-3, -1))
    # E[V eps] / sqrt(dt) with eps = dW / sqrt(dt)
    z0 = np.einsum("...cbiq,bj->...cij", v, lattice.eps0) / (lattice.b0 * lattice.b1 * lattice.sqdt)
    z1 = np.einsum("...cbiq,qj->...cij", v, lattice.eps1) / (lattice.b0 * lattice.b1 * lattice.sqdt)
    return mean, z0, z1


def tilted_probabilities(lattice: NoiseLattice, theta: np.ndarray, k: int,
                         max_theta_sqrt_dt: float = 0.5) -> np.ndarray:
    """Common-branch probabilities under the measure that gives W0 drift -theta.

    Exponential tilting ``q_b ~ exp(-theta . dW0_b)``, normalized per node;
    it factorizes over coordinates as ``(1 - tanh(theta_j sqrt(dt) eps_j)) / 2``.
    ``theta`` is ``(n_common(k), d0)``; the result is ``(n_common(k), B0)``.
    """
    theta = np.asarray(theta, dtype=float)
    x = theta * lattice.sqdt
    worst = np.max(np.linalg.norm(x, axis=-1)) if x.size else 0.0
    if worst >= 1.0 or worst >= max_theta_sqrt_dt:
        raise StepSizeError(
            f"step {k}: |theta| sqrt(dt) = {worst:.4g} >= {min(1.0, max_theta_sqrt_dt)}; refine the grid")
    per_coord = 0.5 * (1.0 - np.tanh(x[:, None, :] * lattice.eps0[None, :, :]))
    q = per_coord.prod(axis=-1)
    if np.any(q <= 0) or np.any(q >= 1):
        raise StepSizeError(f"step {k}: tilted probability outside (0, 1)")
    return q


def backward_expectation_tilted(lattice: NoiseLattice, values: np.ndarray, k: int,
                                q0: np.ndarray):
    """As :func:`backward_expectation` but with common-branch probabilities ``q0``.

    The Z estimates are regression coefficients on the increments under the
    tilted law (coordinates stay independent under the product tilt).
    """
    v = _split(lattice, np.asarray(values, dtype=float), k)
    vi = v.mean(axis=-1)                                  # (..., nc, B0, ni) idio-averaged
    mean = np.einsum("...cbi,cb->...ci", vi, q0)
    m_eps = q0 @ lattice.eps0                             # (nc, d0) tilted mean of eps
    var_eps = 1.0 - m_eps ** 2
    cov = np.einsum("...cbi,cb,bj->...cij", vi, q0, lattice.eps0) - mean[..., None] * m_eps[:, None, :]
    z0 = cov / (var_eps[:, None, :] * lattice.sqdt)
    z1 = np.einsum("...cbiq,cb,qj->...cij", v, q0, lattice.eps1) / (lattice.b1 * lattice.sqdt)
    return mean, z0, z1


def conditional_mean_common(lattice: NoiseLattice, values: np.ndarray, k: int | None = None,
                            weights: np.ndarray | None = None) -> np.ndarray:
    """Average over idiosyncratic nodes (and over atoms when ``weights`` is given).

    ``values`` is ``(n_common, n_idio, ...)``, or ``(A, n_common, n_idio, ...)``
    with ``weights`` of length ``A``. Returns ``(n_common, ...)``.
    """
    x = np.asarray(values, dtype=float)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        x = np.tensordot(w, x, axes=(0, 0))
    if k is not None:
        lattice._check_step(k)
        if x.shape[:2] != lattice.shape(k):
            raise ValueError(f"expected node shape {lattice.shape(k)}, got {x.shape[:2]}")
    return x.mean(axis=1)


def discrete_bmo(lattice: NoiseLattice, z0: list, z1: list) -> float:
    """max over nodes of E[sum_{j>=k} (|Z0_j|^2 + |Z1_j|^2) dt | node].

    ``z0[k]``/``z1[k]`` are ``(..., n_common(k), n_idio(k), dim)``; leading axes
    are maximized over as well.
    """
    acc = None
    best = 0.0
    for k in range(lattice.steps - 1, -1, -1):
        q = (np.sum(z0[k] ** 2, axis=-1) + np.sum(z1[k] ** 2, axis=-1)) * lattice.dt
        if acc is not None:
            q = q + backward_expectation(lattice, acc, k)[0]
        acc = q
        best = max(best, float(np.max(q)))
    return best


# --------------------------------------------------------------------------
# Monte Carlo ensemble


@dataclass(frozen=True)
class PathEnsemble:
    """Gaussian paths: ``M_common`` outer paths, ``M_idio`` inner particles each.

    Every outer path ``m`` draws from its own substream keyed by ``(seed, m)``,
    so generation order and parallel chunking do not change the result.
    """

    grid: TimeGrid
    d0: int
    d: int
    M_common: int
    M_idio: int
    seed: int = 0
    common: np.ndarray = field(init=False, repr=False)
    idio: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K, sq = self.grid.steps, np.sqrt(self.grid.dt)
        w0 = np.zeros((self.M_common, K + 1, self.d0))
        w1 = np.zeros((self.M_common, self.M_idio, K + 1, self.d))
        for m in range(self.M_common):
            rc = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(m, 0)))
            ri = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(m, 1)))
            w0[m, 1:] = np.cumsum(sq * rc.standard_normal((K, self.d0)), axis=0)
            w1[m, :, 1:] = np.cumsum(sq * ri.standard_normal((self.M_idio, K, self.d)), axis=1)
        object.__setattr__(self, "common", w0)
        object.__setattr__(self, "idio", w1)

    def conditional_mean_common(self, values: np.ndarray) -> np.ndarray:
        """Empirical F0-conditional mean: average over the inner particle axis (1)."""
        return np.asarray(values, dtype=float).mean(axis=1)

    def evaluate(self, liability) -> np.ndarray:
        """Liability on every (outer, inner) pair: ``(M_common, M_idio)``."""
        return np.array(liability(self.common[:, None], self.idio), dtype=float)
