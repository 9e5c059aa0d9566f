"""Single-agent quadratic BSDE on the noise tree.

Unnormalized units throughout: ``Y`` is a certainty equivalent in currency,
``Z0``/``Z1`` its integrands against the common and idiosyncratic noise. The
scheme is the explicit first-order one,

    Z_k = E[Y_{k+1} dW | node] / dt,   Y_k = E[Y_{k+1} | node] + f(Z_k) dt,

with ``Y_K`` the evaluated liability.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError, PreconditionError, StepSizeError, ValidationError
from .lattice import (NoiseLattice, _split, backward_expectation, backward_expectation_tilted,
                      discrete_bmo, tilted_probabilities)
from .model import AgentType, MarketModel, positions_from_p, projector

MAX_THETA_SQRT_DT = 0.5


@dataclass
class BsdeSolution:
    """Node-indexed ``(Y, Z0, Z1)``.

    ``Y[k]`` has shape ``(..., n_common(k), n_idio(k))`` for ``k = 0..K``;
    ``Z0[k]``, ``Z1[k]`` (``k = 0..K-1``) add a trailing axis of size ``d0`` or
    ``d``. Leading axes, if any, index population atoms.
    """

    lattice: NoiseLattice = field(repr=False)
    Y: list = field(repr=False)
    Z0: list = field(repr=False)
    Z1: list = field(repr=False)
    Z0_par: list = field(repr=False)
    Z0_perp: list = field(repr=False)
    max_abs_y: float = np.nan
    bmo: float = np.nan

    @property
    def y0(self):
        y = self.Y[0]
        return float(y[..., 0, 0]) if y.ndim == 2 else y[..., 0, 0]

    def normalized(self, gamma):
        """``(y, z0, z1) = gamma * (Y, Z0, Z1)``; ``gamma`` may be per-atom."""
        g = np.asarray(gamma, dtype=float)
        gy = g.reshape(g.shape + (1, 1))
        gz = g.reshape(g.shape + (1, 1, 1))
        return ([gy * y for y in self.Y], [gz * z for z in self.Z0], [gz * z for z in self.Z1])

    def atom(self, a: int) -> "BsdeSolution":
        """Slice out one population atom from a batched solution."""
        pick = lambda seq: [x[a] for x in seq]
        sol = BsdeSolution(self.lattice, pick(self.Y), pick(self.Z0), pick(self.Z1),
                           pick(self.Z0_par), pick(self.Z0_perp))
        sol.max_abs_y = float(max(np.max(np.abs(y)) for y in sol.Y))
        sol.bmo = discrete_bmo(self.lattice, sol.Z0, sol.Z1)
        return sol


@dataclass
class Strategy:
    """Optimal exposure ``p`` (rows in the volatility row space) and positions ``pi``."""

    p: list = field(repr=False)
    pi: list = field(repr=False)


# --------------------------------------------------------------------------
# helpers


def theta_path(lattice: NoiseLattice, theta) -> list:
    """Normalize a risk-premium specification to ``[theta_k (n_common(k), d0)]``.

    Accepts a constant vector, a callable ``theta(k, w0_states)``, or an explicit
    list of per-step arrays.
    """
    K, d0 = lattice.steps, lattice.d0
    if callable(theta):
        out = [np.asarray(theta(k, lattice.common_states(k)), dtype=float) for k in range(K)]
    elif isinstance(theta, (list, tuple)) and len(theta) == K and np.ndim(theta[0]) == 2:
        out = [np.asarray(t, dtype=float) for t in theta]
    else:
        try:
            vec = np.broadcast_to(np.asarray(theta, dtype=float), (d0,))
        except ValueError:
            raise PreconditionError(f"theta of shape {np.shape(theta)} is neither a d0-vector nor a "
                                    "per-step list indexed by common node", "theta.adapted") from None
        out = [np.broadcast_to(vec, (lattice.n_common(k), d0)).copy() for k in range(K)]
    for k, t in enumerate(out):
        if t.shape != (lattice.n_common(k), d0):
            raise PreconditionError(
                f"theta at step {k} has shape {t.shape}; it must be indexed by common node only",
                "theta.adapted")
    return out


def _check_theta(lattice, market, thetas, max_theta_sqrt_dt):
    projs = []
    for k, t in enumerate(thetas):
        proj = lattice.projectors(market, k)
        t_par = np.einsum("cij,cj->ci", proj, t)
        if np.max(np.abs(t_par - t), initial=0.0) > 1e-10 * (1.0 + np.max(np.abs(t), initial=0.0)):
            raise PreconditionError(f"theta at step {k} is not in the volatility row space",
                                    "theta.row_space")
        worst = float(np.max(np.linalg.norm(t, axis=-1), initial=0.0)) * lattice.sqdt
        if worst >= max_theta_sqrt_dt:
            raise StepSizeError(
                f"step {k}: |theta| sqrt(dt) = {worst:.4g} >= {max_theta_sqrt_dt}; refine the grid")
        projs.append(proj)
    return projs


def _split_par(proj: np.ndarray, z0: np.ndarray):
    # proj is (n_common, d0, d0); z0 is (..., n_common, n_idio, d0)
    z_par = np.einsum("cij,...cnj->...cni", proj, z0)
    return z_par, z0 - z_par


def _terminal(lattice, agent, terminal):
    if terminal is None:
        terminal = lattice.terminal_values(agent.liability)
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape[-2:] != lattice.shape(lattice.steps):
        raise ValueError("terminal values do not match the lattice")
    return terminal


def _check_liability(terminal, bound):
    worst = float(np.max(np.abs(terminal), initial=0.0))
    if worst > bound * (1 + 1e-12) + 1e-15:
        raise ValidationError(f"liability reaches {worst:.6g} > declared bound {bound:.6g}",
                              "agent.liability_bound")


def _finite(k, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite values at step {k}; dt is too coarse for the "
                                 "quadratic driver")


# --------------------------------------------------------------------------
# drivers


def driver_agent(z0, z1, theta, gamma, sigma=None, proj=None):
    """-z0_par . theta - |theta|^2 / (2 gamma) + gamma/2 (|z0_perp|^2 + |z1|^2).

    The split of ``z0`` uses the row space of ``sigma`` (or a precomputed
    projector ``proj``); with neither, ``z0`` is taken to be fully traded.
    """
    z0 = np.asarray(z0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if proj is None and sigma is not None:
        proj = projector(sigma)
    if proj is None:
        z_par, z_perp = z0, np.zeros_like(z0)
    else:
        z_par = np.einsum("...ij,...j->...i", proj, z0)
        z_perp = z0 - z_par
    return (-np.sum(z_par * theta, axis=-1) - np.sum(theta ** 2, axis=-1) / (2 * gamma)
            + 0.5 * gamma * (np.sum(z_perp ** 2, axis=-1) + np.sum(z1 ** 2, axis=-1)))


# --------------------------------------------------------------------------
# solvers


def solve_agent_bsde(lattice: NoiseLattice, market: MarketModel, agent: AgentType, theta,
                     terminal=None, max_theta_sqrt_dt: float = MAX_THETA_SQRT_DT) -> BsdeSolution:
    """Backward sweep for one agent facing the risk premium ``theta``.

    Raises :class:`NumericalError` naming the step if the sweep produces
    non-finite values, and :class:`StepSizeError` when ``|theta| sqrt(dt)``
    reaches ``max_theta_sqrt_dt``.
    """
    thetas = theta_path(lattice, theta)
    projs = _check_theta(lattice, market, thetas, max_theta_sqrt_dt)
    F = _terminal(lattice, agent, terminal)
    if terminal is None:
        _check_liability(F, agent.liability.sup_bound)
    g, dt = agent.gamma, lattice.dt
    K = lattice.steps
    Y = [None] * (K + 1)
    Z0, Z1, Zp, Zq = ([None] * K for _ in range(4))
    Y[K] = F
    for k in range(K - 1, -1, -1):
        ey, z0, z1 = backward_expectation(lattice, Y[k + 1], k)
        z_par, z_perp = _split_par(projs[k], z0)
        th = thetas[k][:, None, :]
        f = (-np.sum(z_par * th, axis=-1) - np.sum(th ** 2, axis=-1) / (2 * g)
             + 0.5 * g * (np.sum(z_perp ** 2, axis=-1) + np.sum(z1 ** 2, axis=-1)))
        Y[k] = ey + f * dt
        _finite(k, Y[k], z0, z1)
        Z0[k], Z1[k], Zp[k], Zq[k] = z0, z1, z_par, z_perp
    sol = BsdeSolution(lattice, Y, Z0, Z1, Zp, Zq)
    sol.max_abs_y = float(max(np.max(np.abs(y)) for y in Y))
    sol.bmo = discrete_bmo(lattice, Z0, Z1)
    return sol


def solve_agent_bsde_qmeasure(lattice: NoiseLattice, market: MarketModel, agent: AgentType,
                              theta, terminal=None,
                              max_theta_sqrt_dt: float = MAX_THETA_SQRT_DT) -> BsdeSolution:
    """Same problem after removing the ``-z0_par . theta`` term by a change of measure.

    Common branches are reweighted by normalized exponential tilting so that W0
    has drift ``-theta``; the driver becomes
    ``-|theta|^2/(2 gamma) + gamma/2 (|Z0_perp|^2 + |Z1|^2)``.
    """
    thetas = theta_path(lattice, theta)
    projs = _check_theta(lattice, market, thetas, max_theta_sqrt_dt)
    F = _terminal(lattice, agent, terminal)
    if terminal is None:
        _check_liability(F, agent.liability.sup_bound)
    g, dt = agent.gamma, lattice.dt
    K = lattice.steps
    Y = [None] * (K + 1)
    Z0, Z1, Zp, Zq = ([None] * K for _ in range(4))
    Y[K] = F
    for k in range(K - 1, -1, -1):
        q0 = tilted_probabilities(lattice, thetas[k], k, max_theta_sqrt_dt)
        ey, z0, z1 = backward_expectation_tilted(lattice, Y[k + 1], k, q0)
        z_par, z_perp = _split_par(projs[k], z0)
        th = thetas[k][:, None, :]
        f = (-np.sum(th ** 2, axis=-1) / (2 * g)
             + 0.5 * g * (np.sum(z_perp ** 2, axis=-1) + np.sum(z1 ** 2, axis=-1)))
        Y[k] = ey + f * dt
        _finite(k, Y[k], z0, z1)
        Z0[k], Z1[k], Zp[k], Zq[k] = z0, z1, z_par, z_perp
    sol = BsdeSolution(lattice, Y, Z0, Z1, Zp, Zq)
    sol.max_abs_y = float(max(np.max(np.abs(y)) for y in Y))
    sol.bmo = discrete_bmo(lattice, Z0, Z1)
    return sol


def measurability(lattice: NoiseLattice, values: np.ndarray) -> str:
    """Classify terminal values as 'constant', 'common', 'idio' or 'mixed'."""
    v = np.asarray(values, dtype=float)
    common = np.array_equal(v, np.broadcast_to(v[:, :1], v.shape))
    idio = np.array_equal(v, np.broadcast_to(v[:1, :], v.shape))
    if common and idio:
        return "constant"
    if common:
        return "common"
    if idio:
        return "idio"
    return "mixed"


def solve_closed_form(lattice: NoiseLattice, G: np.ndarray) -> list:
    """Exact tree solution of the ``1/2 |z|^2`` BSDE: ``y_k = ln E[exp(y_{k+1}) | node]``.

    ``G`` must depend on one noise family only (or be constant).
    """
    G = np.asarray(G, dtype=float)
    if G.shape != lattice.shape(lattice.steps):
        raise ValueError("terminal values do not match the lattice")
    if measurability(lattice, G) == "mixed":
        raise PreconditionError("closed form needs a terminal value driven by one noise family",
                                "closed_form.measurability")
    K = lattice.steps
    y = [None] * (K + 1)
    y[K] = G
    log_branches = np.log(lattice.b0 * lattice.b1)
    for k in range(K - 1, -1, -1):
        v = _split(lattice, y[k + 1], k)
        y[k] = logsumexp(v, axis=(-3, -1)) - log_branches
    return y


def solve_quadratic_scheme(lattice: NoiseLattice, G: np.ndarray):
    """Explicit-scheme counterpart of :func:`solve_closed_form`.

    ``y_k = E[y_{k+1}] + 1/2 (|z0_k|^2 + |z1_k|^2) dt``; returns ``(y, z0, z1)``.
    """
    G = np.asarray(G, dtype=float)
    K = lattice.steps
    y = [None] * (K + 1)
    z0, z1 = [None] * K, [None] * K
    y[K] = G
    for k in range(K - 1, -1, -1):
        ey, a, b = backward_expectation(lattice, y[k + 1], k)
        y[k] = ey + 0.5 * (np.sum(a ** 2, axis=-1) + np.sum(b ** 2, axis=-1)) * lattice.dt
        _finite(k, y[k])
        z0[k], z1[k] = a, b
    return y, z0, z1


def regress_integrands(lattice: NoiseLattice, values: list):
    """``(z0, z1)`` per step from node values ``values[k]``, k = 0..K."""
    z0, z1 = [], []
    for k in range(lattice.steps):
        _, a, b = backward_expectation(lattice, values[k + 1], k)
        z0.append(a)
        z1.append(b)
    return z0, z1


# --------------------------------------------------------------------------
# strategies


def optimal_strategy(solution: BsdeSolution, theta, gamma, market: MarketModel) -> Strategy:
    """p* = Z0_par + theta^T / gamma and the positions pi* solving pi^T sigma = p*.

    ``gamma`` may be a scalar or, for a batched solution, one value per atom.
    """
    lat = solution.lattice
    thetas = theta_path(lat, theta)
    g = np.asarray(gamma, dtype=float)
    lead = solution.Z0_par[0].shape[:-3]
    if g.ndim and g.shape != lead:
        raise ValueError(f"gamma has shape {g.shape}, solution has atoms {lead}")
    gz = g.reshape(g.shape + (1, 1, 1))
    if solution.Z0_par[0].shape[-1] != lat.d0 or thetas[0].shape[-1] != lat.d0:
        raise ValueError("dimension mismatch between solution, theta and lattice")
    p, pi = [], []
    for k in range(lat.steps):
        pk = solution.Z0_par[k] + thetas[k][:, None, :] / gz
        sig = lat.sigma(market, k)[:, None]  # (nc, 1, n, d0)
        p.append(pk)
        pi.append(positions_from_p(sig, pk))
    return Strategy(p, pi)


@dataclass
class ShiftReport:
    shift: float
    max_abs_dp: float
    identical_bytes: bool
    y0_original: float
    y0_shifted: float
    y0_gap_error: float

    @property
    def passed(self) -> bool:
        return self.max_abs_dp <= 1e-12 and self.y0_gap_error <= 1e-12 * (1 + abs(self.shift))


def shift_invariance_check(lattice: NoiseLattice, market: MarketModel, agent: AgentType,
                           theta) -> ShiftReport:
    """Re-solve with ``xi - E[F]`` and ``F - E[F]`` and compare the strategies.

    The agent's type is known at time zero, so the conditional mean of the
    liability given initial information is its full tree mean.
    """
    F = lattice.terminal_values(agent.liability)
    c = float(F.mean())
    shifted = AgentType(xi=agent.xi - c, gamma=agent.gamma, liability=agent.liability)
    s1 = solve_agent_bsde(lattice, market, agent, theta)
    s2 = solve_agent_bsde(lattice, market, shifted, theta, terminal=F - c)
    p1 = optimal_strategy(s1, theta, agent.gamma, market).p
    p2 = optimal_strategy(s2, theta, agent.gamma, market).p
    dp = max(float(np.max(np.abs(a - b))) for a, b in zip(p1, p2))
    same = all(a.tobytes() == b.tobytes() for a, b in zip(p1, p2))
    return ShiftReport(shift=c, max_abs_dp=dp, identical_bytes=same, y0_original=s1.y0,
                       y0_shifted=s2.y0, y0_gap_error=abs((s1.y0 - s2.y0) - c))
