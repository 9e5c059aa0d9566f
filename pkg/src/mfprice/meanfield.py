"""Mean-field BSDE: Picard iteration of the frozen-driver map and the additive fast path.

For a population of atoms ``a`` (weight ``w_a``, risk aversion ``gamma_a``,
liability ``F_a``) the representative agent solves

    Y^a = F^a + int f_a(Z^a) ds - int Z^a0 dW0 - int Z^a1 dW1,
    f_a = gh Z0_par . zbar - gh^2/(2 gamma_a) |zbar|^2 + gamma_a/2 (|Z0_perp|^2 + |Z1|^2),

where ``gh`` is the harmonic-mean risk aversion and ``zbar`` the conditional
mean of ``Z0_par`` given the common noise, averaged over idiosyncratic nodes
and atoms. The equilibrium premium is ``theta = -gh * zbar``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bsde import (BsdeSolution, _finite, _split_par, regress_integrands, solve_closed_form,
                   solve_quadratic_scheme)
from .errors import DivergenceError, NumericalError, PreconditionError
from .lattice import NoiseLattice, backward_expectation, discrete_bmo
from .model import MarketModel, PopulationLaw

log = logging.getLogger(__name__)

BALL_SLACK = 1.10


@dataclass(frozen=True)
class GammaConstants:
    gamma_lo: float
    gamma_hi: float
    gamma_hat: float
    liability_sup: float = 0.0

    @classmethod
    def from_population(cls, pop: PopulationLaw) -> "GammaConstants":
        return cls(pop.gamma_lo, pop.gamma_hi, pop.gamma_hat, pop.liability_sup)

    @property
    def c_gamma(self) -> float:
        """Constant of the driver bound |f| <= c (|z|^2 + |zbar|^2) in BMO form."""
        return self.gamma_hi / 2 + self.gamma_hat ** 2 / self.gamma_lo

    @property
    def C_gamma(self) -> float:
        """Lipschitz constant of the driver (term-by-term bound, checked by tests)."""
        return max(self.gamma_hat, self.gamma_hat ** 2 / (2 * self.gamma_lo), self.gamma_hi / 2)

    @property
    def R(self) -> float:
        return np.sqrt(2.0) * self.liability_sup

    @property
    def threshold(self) -> float:
        """Liability size below which the frozen-driver map contracts on the ball."""
        return 1.0 / (12.0 * np.sqrt(2.0) * self.C_gamma)

    @property
    def stability_bound(self) -> float:
        """Liability size below which the ball of radius R is mapped into itself."""
        return 1.0 / (2.0 * self.c_gamma)

    @property
    def in_theory(self) -> bool:
        return self.liability_sup < self.threshold

    @property
    def y_bound(self) -> float:
        return np.sqrt(3.0) * self.R


@dataclass
class IterationDiag:
    iteration: int
    delta: float
    ratio: float
    in_ball: bool
    bmo: float
    max_abs_y: float


@dataclass
class MeanFieldSolution:
    representative: BsdeSolution = field(repr=False)
    zbar: list = field(repr=False)
    theta_mfg: list = field(repr=False)
    constants: GammaConstants
    diagnostics: list = field(default_factory=list)
    converged: bool = True
    method: str = "picard"

    @property
    def iterations(self) -> int:
        return len(self.diagnostics)

    @property
    def theta0(self) -> np.ndarray:
        return self.theta_mfg[0][0]

    @property
    def y_within_bound(self) -> bool:
        return self.representative.max_abs_y <= self.constants.y_bound * BALL_SLACK


# --------------------------------------------------------------------------
# driver


def driver_meanfield(z0, z1, zbar_par, gamma, gamma_hat, sigma=None, proj=None):
    """gh z0_par . zbar - gh^2/(2 gamma) |zbar|^2 + gamma/2 (|z0_perp|^2 + |z1|^2)."""
    from .model import projector
    z0 = np.asarray(z0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    zb = np.asarray(zbar_par, dtype=float)
    if proj is None and sigma is not None:
        proj = projector(sigma)
    if proj is None:
        z_par, z_perp = z0, np.zeros_like(z0)
    else:
        z_par = np.einsum("...ij,...j->...i", proj, z0)
        z_perp = z0 - z_par
    gh = gamma_hat
    return (gh * np.sum(z_par * zb, axis=-1) - gh ** 2 / (2 * gamma) * np.sum(zb ** 2, axis=-1)
            + 0.5 * gamma * (np.sum(z_perp ** 2, axis=-1) + np.sum(z1 ** 2, axis=-1)))


# --------------------------------------------------------------------------
# problem setup shared by the solvers


class _Problem:
    def __init__(self, lattice: NoiseLattice, market: MarketModel, pop: PopulationLaw):
        from .bsde import _check_liability
        self.lattice, self.market, self.pop = lattice, market, pop
        self.weights = pop.weights
        self.gammas = pop.gammas
        self.gamma_hat = pop.gamma_hat
        self.constants = GammaConstants.from_population(pop)
        self.projs = [lattice.projectors(market, k) for k in range(lattice.steps)]
        F = np.stack([lattice.terminal_values(a.liability) for a in pop.agents])
        for a, agent in enumerate(pop.agents):
            _check_liability(F[a], agent.liability.sup_bound)
        self.F = F

    def zbar(self, z_par: np.ndarray) -> np.ndarray:
        # z_par: (A, nc, ni, d0) -> (nc, d0)
        return np.tensordot(self.weights, z_par, axes=(0, 0)).mean(axis=1)

    def driver(self, k, z0, z1):
        z_par, z_perp = _split_par(self.projs[k], z0)
        zb = self.zbar(z_par)
        g = self.gammas[:, None, None]
        gh = self.gamma_hat
        f = (gh * np.einsum("ancj,nj->anc", z_par, zb)
             - gh ** 2 / (2 * g) * np.sum(zb ** 2, axis=-1)[None, :, None]
             + 0.5 * g * (np.sum(z_perp ** 2, axis=-1) + np.sum(z1 ** 2, axis=-1)))
        return f, z_par, z_perp, zb

    def package(self, Y, Z0, Z1) -> BsdeSolution:
        Zp, Zq = [], []
        for k in range(self.lattice.steps):
            a, b = _split_par(self.projs[k], Z0[k])
            Zp.append(a)
            Zq.append(b)
        sol = BsdeSolution(self.lattice, Y, Z0, Z1, Zp, Zq)
        sol.max_abs_y = float(max(np.max(np.abs(y)) for y in Y))
        sol.bmo = discrete_bmo(self.lattice, Z0, Z1)
        return sol

    def zeros(self):
        lat, A = self.lattice, len(self.weights)
        z0 = [np.zeros((A,) + lat.shape(k) + (lat.d0,)) for k in range(lat.steps)]
        z1 = [np.zeros((A,) + lat.shape(k) + (lat.d,)) for k in range(lat.steps)]
        return z0, z1


def _apply_gamma(prob: _Problem, z0_in: list, z1_in: list) -> BsdeSolution:
    lat = prob.lattice
    K = lat.steps
    Y = [None] * (K + 1)
    Z0, Z1 = [None] * K, [None] * K
    Y[K] = prob.F
    for k in range(K - 1, -1, -1):
        f = prob.driver(k, z0_in[k], z1_in[k])[0]
        ey, z0, z1 = backward_expectation(lat, Y[k + 1], k)
        Y[k] = ey + f * lat.dt
        _finite(k, Y[k], z0, z1)
        Z0[k], Z1[k] = z0, z1
    return prob.package(Y, Z0, Z1)


def gamma_map(lattice: NoiseLattice, market: MarketModel, pop: PopulationLaw, z_input) -> BsdeSolution:
    """Solve the linear BSDE whose driver is frozen at ``z_input = (z0, z1)``.

    ``z_input`` holds per-step lists with a leading atom axis. The returned
    solution carries the new integrands and the value process ``Y``.
    """
    z0, z1 = z_input
    return _apply_gamma(_Problem(lattice, market, pop), z0, z1)


def _distance(lattice, a: BsdeSolution | tuple, b: BsdeSolution | tuple) -> float:
    a0, a1 = (a.Z0, a.Z1) if isinstance(a, BsdeSolution) else a
    b0, b1 = (b.Z0, b.Z1) if isinstance(b, BsdeSolution) else b
    d0 = [x - y for x, y in zip(a0, b0)]
    d1 = [x - y for x, y in zip(a1, b1)]
    sup = max(float(np.max(np.sqrt(np.sum(x ** 2, axis=-1) + np.sum(y ** 2, axis=-1))))
              for x, y in zip(d0, d1))
    return sup + np.sqrt(discrete_bmo(lattice, d0, d1))


def contraction_measure(lattice, market, pop, z, z_other):
    """Squared-BMO-surrogate ratio of the map on a pair of inputs.

    Returns ``(ratio, bound)`` where ``ratio = bmo(G(z)-G(z')) / bmo(z-z')`` and
    ``bound = 144 C^2 r^2`` with ``r^2`` the larger input surrogate.
    """
    prob = _Problem(lattice, market, pop)
    out_a = _apply_gamma(prob, *z)
    out_b = _apply_gamma(prob, *z_other)
    num = discrete_bmo(lattice, [x - y for x, y in zip(out_a.Z0, out_b.Z0)],
                       [x - y for x, y in zip(out_a.Z1, out_b.Z1)])
    den = discrete_bmo(lattice, [x - y for x, y in zip(z[0], z_other[0])],
                       [x - y for x, y in zip(z[1], z_other[1])])
    r2 = max(discrete_bmo(lattice, *z), discrete_bmo(lattice, *z_other))
    return num / den, 144.0 * prob.constants.C_gamma ** 2 * r2


def _finish(prob: _Problem, sol: BsdeSolution, diags, converged, method) -> MeanFieldSolution:
    zbar = [prob.zbar(zp) for zp in sol.Z0_par]
    theta = [-prob.gamma_hat * zb for zb in zbar]
    return MeanFieldSolution(sol, zbar, theta, prob.constants, diags, converged, method)


def solve_fixed_point(lattice: NoiseLattice, market: MarketModel, pop: PopulationLaw,
                      tol: float = 1e-10, max_iter: int = 50, strict: bool = True) -> MeanFieldSolution:
    """Picard iteration of :func:`gamma_map` started from zero integrands.

    Stops when the change between iterates (sup-norm plus BMO-surrogate norm)
    drops to ``tol``. Raises :class:`DivergenceError` with the ratio history if
    ``max_iter`` is exhausted. With ``strict`` and a liability inside the
    ball-stability bound, an iterate leaving the ball raises
    :class:`NumericalError`.
    """
    if not tol > 0:
        raise PreconditionError("tol must be positive", "solver.tol")
    prob = _Problem(lattice, market, pop)
    cst = prob.constants
    check_ball = strict and cst.liability_sup <= cst.stability_bound
    z = prob.zeros()
    diags, prev = [], None
    sol = None
    for it in range(1, max_iter + 1):
        sol = _apply_gamma(prob, *z)
        delta = _distance(lattice, sol, z)
        ratio = delta / prev if prev not in (None, 0.0) else np.nan
        in_ball = sol.bmo <= cst.R ** 2 * BALL_SLACK
        diags.append(IterationDiag(it, delta, ratio, in_ball, sol.bmo, sol.max_abs_y))
        log.debug("picard %d: delta=%.3e ratio=%.3g bmo=%.3e", it, delta, ratio, sol.bmo)
        if check_ball and not in_ball:
            raise NumericalError(f"iterate {it} left the ball: bmo {sol.bmo:.4g} > R^2 {cst.R ** 2:.4g}")
        if delta <= tol:
            return _finish(prob, sol, diags, True, "picard")
        z = (sol.Z0, sol.Z1)
        prev = delta
    raise DivergenceError(f"no convergence after {max_iter} iterations "
                          f"(|F| = {cst.liability_sup:.4g}, threshold {cst.threshold:.4g})",
                          ratios=[d.ratio for d in diags])


def solve_backward_sweep(lattice: NoiseLattice, market: MarketModel, pop: PopulationLaw) -> MeanFieldSolution:
    """Solve the discrete mean-field equations in one sweep.

    On the tree ``Z_k`` depends only on ``Y_{k+1}``, so the conditional mean is
    known before ``Y_k`` is formed; this is the exact fixed point of the Picard
    map and serves as its cross-check.
    """
    prob = _Problem(lattice, market, pop)
    K = lattice.steps
    Y = [None] * (K + 1)
    Z0, Z1 = [None] * K, [None] * K
    Y[K] = prob.F
    for k in range(K - 1, -1, -1):
        ey, z0, z1 = backward_expectation(lattice, Y[k + 1], k)
        f = prob.driver(k, z0, z1)[0]
        Y[k] = ey + f * lattice.dt
        _finite(k, Y[k])
        Z0[k], Z1[k] = z0, z1
    return _finish(prob, prob.package(Y, Z0, Z1), [], True, "sweep")


def solve_additive(lattice: NoiseLattice, market: MarketModel, pop: PopulationLaw,
                   method: str = "scheme") -> MeanFieldSolution:
    """Fast path for liabilities ``F_a = F0(w0) / gamma_a + F1_a(w1)``.

    In normalized units the problem splits into two decoupled ``1/2 |z|^2``
    BSDEs, one per noise family. ``method='scheme'`` solves them with the
    explicit recursion (same discretization as the Picard solver, so the two
    agree to rounding); ``method='closed_form'`` uses the exact tree
    log-expectation, which agrees to first order in dt.
    """
    if not pop.all_additive:
        raise PreconditionError("every atom needs an additive liability", "additive.structure")
    prob = _Problem(lattice, market, pop)
    w0 = lattice.common_paths()
    w1 = lattice.idio_paths()
    commons = [np.asarray(a.liability.common_part(w0), dtype=float) for a in pop.agents]
    if any(not np.array_equal(c, commons[0]) for c in commons[1:]):
        raise PreconditionError("atoms disagree on the common part of the liability",
                                "additive.common_part")
    nc, ni = lattice.shape(lattice.steps)
    G0 = np.broadcast_to(commons[0][:, None], (nc, ni)).copy()
    G1 = [np.broadcast_to(a.gamma * np.asarray(a.liability.idio_part(w1), dtype=float)[None, :],
                          (nc, ni)).copy() for a in pop.agents]
    if method == "scheme":
        y0, z00, _ = solve_quadratic_scheme(lattice, G0)
        parts = [solve_quadratic_scheme(lattice, g) for g in G1]
        y1 = [p[0] for p in parts]
        z11 = [p[2] for p in parts]
    elif method == "closed_form":
        y0 = solve_closed_form(lattice, G0)
        z00, _ = regress_integrands(lattice, y0)
        y1 = [solve_closed_form(lattice, g) for g in G1]
        z11 = [regress_integrands(lattice, y)[1] for y in y1]
    else:
        raise ValueError(f"unknown method {method!r}")
    g = prob.gammas
    K = lattice.steps
    Y = [np.stack([(y0[k] + y1[a][k]) / g[a] for a in range(len(g))]) for k in range(K + 1)]
    Z0 = [np.stack([z00[k] / g[a] for a in range(len(g))]) for k in range(K)]
    Z1 = [np.stack([z11[a][k] / g[a] for a in range(len(g))]) for k in range(K)]
    sol = prob.package(Y, Z0, Z1)
    zbar = [np.einsum("cij,cj->ci", prob.projs[k], z00[k][:, 0, :]) / prob.gamma_hat
            for k in range(K)]
    theta = [-prob.gamma_hat * zb for zb in zbar]
    return MeanFieldSolution(sol, zbar, theta, prob.constants, [], True, f"additive-{method}")


def atom_strategies(mf: MeanFieldSolution, pop: PopulationLaw, market: MarketModel):
    """Optimal strategies of every atom under the equilibrium premium."""
    from .bsde import optimal_strategy
    return optimal_strategy(mf.representative, mf.theta_mfg, pop.gammas, market)
