"""Market, agent and population types, plus the projection algebra.

Conventions used across the package:

* row vectors (``z``, ``p``, ``theta``) live in the trailing axis of length ``d0``;
* ``sigma`` at a time slice is an array ``(n_common, n, d0)``, one matrix per
  common-noise node;
* paths are arrays ``(..., k + 1, dim)`` of Brownian values, starting at zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ModelError, ValidationError

RANK_RTOL = 1e-10

STRUCTURE_TAGS = ("common-only", "idio-only", "additive", "general")


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive", "grid.T")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError("steps must be a positive integer", "grid.K")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t


# --------------------------------------------------------------------------
# projection algebra


def _check_rank(gram: np.ndarray) -> None:
    # eigenvalues of sigma sigma^T are the squared singular values of sigma
    ev = np.linalg.eigvalsh(gram)
    smax = np.sqrt(np.maximum(ev[..., -1], 0.0))
    smin = np.sqrt(np.maximum(ev[..., 0], 0.0))
    if np.any(smin <= RANK_RTOL * smax) or np.any(smax == 0):
        raise ModelError("volatility matrix is rank deficient", "market.rank")


def projector(sigma: np.ndarray) -> np.ndarray:
    """Orthogonal projector onto the row space of ``sigma``.

    Works on a single ``(n, d0)`` matrix or a stack ``(..., n, d0)``; returns
    ``sigma^T (sigma sigma^T)^{-1} sigma`` with matching leading axes.
    """
    sigma = np.asarray(sigma, dtype=float)
    gram = sigma @ np.swapaxes(sigma, -1, -2)
    _check_rank(gram)
    # LU with partial pivoting on the normal equations
    return np.swapaxes(sigma, -1, -2) @ np.linalg.solve(gram, sigma)


def project(sigma_node: np.ndarray, z: np.ndarray):
    """Split the row ``z`` into its component in the row space of ``sigma_node``
    and the orthogonal remainder. Returns ``(z_par, z_perp)``."""
    z = np.asarray(z, dtype=float)
    proj = projector(sigma_node)
    z_par = np.einsum("...ij,...j->...i", proj, z)
    return z_par, z - z_par


def risk_premium_from_drift(sigma_node: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """theta = sigma^T (sigma sigma^T)^{-1} mu."""
    sigma = np.asarray(sigma_node, dtype=float)
    mu = np.asarray(mu, dtype=float)
    gram = sigma @ np.swapaxes(sigma, -1, -2)
    _check_rank(gram)
    u = np.linalg.solve(gram, mu[..., None])
    return (np.swapaxes(sigma, -1, -2) @ u)[..., 0]


def positions_from_p(sigma_node: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Invested amounts pi with pi^T sigma = p, i.e. pi = (sigma sigma^T)^{-1} sigma p^T."""
    sigma = np.asarray(sigma_node, dtype=float)
    gram = sigma @ np.swapaxes(sigma, -1, -2)
    rhs = np.einsum("...ij,...j->...i", sigma, p)
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


# --------------------------------------------------------------------------
# market


@dataclass(frozen=True)
class MarketModel:
    """Volatility model driven by the common noise only.

    ``sigma_fn(k, w0)`` maps a step index and common Brownian states ``(m, d0)``
    to volatility matrices ``(m, n, d0)``.
    """

    n: int
    d0: int
    d: int
    sigma_fn: Callable[[int, np.ndarray], np.ndarray] = field(repr=False)
    lambda_lo: float
    lambda_hi: float

    def __post_init__(self):
        if not (1 <= self.n <= self.d0):
            raise ValidationError(f"need 1 <= n <= d0, got n={self.n}, d0={self.d0}",
                                  "market.dimensions")
        if self.d < 0:
            raise ValidationError("idiosyncratic dimension must be >= 0", "market.dimensions")
        if not (0 < self.lambda_lo < self.lambda_hi):
            raise ValidationError("need 0 < lambda_lo < lambda_hi", "market.eigen_bounds")

    @classmethod
    def constant(cls, sigma, d: int = 1, lambda_lo=None, lambda_hi=None, vol_amplitude=0.0):
        """Constant matrix, optionally scaled by ``1 + a tanh(W0_1)`` with ``|a| < 1``."""
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        n, d0 = sigma.shape
        if not abs(vol_amplitude) < 1:
            raise ValidationError("stochastic-vol amplitude must satisfy |a| < 1",
                                  "market.vol_amplitude")
        ev = np.linalg.eigvalsh(sigma @ sigma.T)
        a = abs(vol_amplitude)
        if lambda_lo is None:
            lambda_lo = 0.99 * ev[0] * (1 - a) ** 2
        if lambda_hi is None:
            lambda_hi = 1.01 * ev[-1] * (1 + a) ** 2

        def sigma_fn(k, w0, _s=sigma, _a=float(vol_amplitude)):
            w0 = np.asarray(w0, dtype=float)
            scale = 1.0 + _a * np.tanh(w0[..., 0]) if _a else np.ones(w0.shape[:-1])
            return scale[..., None, None] * _s

        return cls(n=n, d0=d0, d=d, sigma_fn=sigma_fn,
                   lambda_lo=float(lambda_lo), lambda_hi=float(lambda_hi))

    def sigma(self, k: int, w0: np.ndarray) -> np.ndarray:
        s = np.asarray(self.sigma_fn(k, w0), dtype=float)
        expected = np.asarray(w0).shape[:-1] + (self.n, self.d0)
        if s.shape != expected:
            raise ModelError(f"sigma has shape {s.shape}, expected {expected}", "market.shape")
        return s

    def check_bounds(self, sigma: np.ndarray, tol: float = 1e-12) -> None:
        ev = np.linalg.eigvalsh(sigma @ np.swapaxes(sigma, -1, -2))
        lo, hi = ev[..., 0].min(), ev[..., -1].max()
        if lo < self.lambda_lo * (1 - tol) or hi > self.lambda_hi * (1 + tol):
            raise ModelError(
                f"eigenvalues of sigma sigma^T in [{lo:.6g}, {hi:.6g}] leave "
                f"[{self.lambda_lo:.6g}, {self.lambda_hi:.6g}]", "market.eigen_bounds")


# --------------------------------------------------------------------------
# agents and population


def _terminal(paths: np.ndarray) -> np.ndarray:
    return np.asarray(paths)[..., -1, 0]


@dataclass(frozen=True)
class LiabilitySpec:
    """Terminal liability as a function of (common path, idiosyncratic path).

    ``evaluate(w0, w1)`` receives broadcastable path arrays ``(..., K+1, d0)``
    and ``(..., K+1, d)``. For the additive structure ``common_part`` and
    ``idio_part`` hold the two pieces and ``gamma`` the risk aversion that
    divides the common piece.
    """

    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    sup_bound: float
    structure_tag: str = "general"
    common_part: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    idio_part: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    gamma: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        if self.structure_tag not in STRUCTURE_TAGS:
            raise ConfigError(f"unknown structure tag {self.structure_tag!r}")
        if not self.sup_bound >= 0:
            raise ConfigError("sup_bound must be >= 0")
        if self.structure_tag == "additive" and (
                self.common_part is None or self.idio_part is None or self.gamma is None):
            raise ConfigError("additive liability needs common_part, idio_part and gamma")

    def __call__(self, w0, w1):
        out = self.evaluate(w0, w1)
        shape = np.broadcast_shapes(np.shape(w0)[:-2], np.shape(w1)[:-2])
        return np.broadcast_to(np.asarray(out, dtype=float), shape)

    # constructors --------------------------------------------------------
    @classmethod
    def constant(cls, value: float):
        return cls(lambda w0, w1: np.full(np.broadcast_shapes(w0.shape[:-2], w1.shape[:-2]), value),
                   sup_bound=abs(value), structure_tag="common-only", label=f"constant({value})")

    @classmethod
    def common(cls, fn, sup_bound, label="common"):
        return cls(lambda w0, w1: fn(w0) + np.zeros(np.shape(w1)[:-2]), sup_bound=sup_bound,
                   structure_tag="common-only", label=label)

    @classmethod
    def idio(cls, fn, sup_bound, label="idio"):
        return cls(lambda w0, w1: fn(w1) + np.zeros(np.shape(w0)[:-2]), sup_bound=sup_bound,
                   structure_tag="idio-only", label=label)

    @classmethod
    def general(cls, fn, sup_bound, label="general"):
        return cls(fn, sup_bound=sup_bound, structure_tag="general", label=label)

    @classmethod
    def additive(cls, common_part, idio_part, gamma, common_bound, idio_bound, label="additive"):
        """F = common_part(w0) / gamma + idio_part(w1)."""
        def evaluate(w0, w1):
            return common_part(w0) / gamma + idio_part(w1)

        return cls(evaluate, sup_bound=common_bound / gamma + idio_bound,
                   structure_tag="additive", common_part=common_part, idio_part=idio_part,
                   gamma=float(gamma), label=label)

    @classmethod
    def common_sign(cls, amplitude):
        return cls.common(lambda w0: amplitude * np.sign(_terminal(w0)), abs(amplitude),
                          label=f"common-sign({amplitude})")

    @classmethod
    def idio_sign(cls, amplitude):
        return cls.idio(lambda w1: amplitude * np.sign(_terminal(w1)), abs(amplitude),
                        label=f"idio-sign({amplitude})")

    @classmethod
    def mixed_sign(cls, amplitude):
        return cls.general(lambda w0, w1: amplitude * np.sign(_terminal(w0) + _terminal(w1)),
                           abs(amplitude), label=f"mixed-sign({amplitude})")


@dataclass(frozen=True)
class AgentType:
    xi: float
    gamma: float
    liability: LiabilitySpec

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValidationError("risk aversion must be positive", "agent.gamma_bounds")
        if self.liability.structure_tag == "additive" and not np.isclose(
                self.liability.gamma, self.gamma, rtol=0, atol=0):
            raise ValidationError("additive liability built for a different gamma",
                                  "agent.additive_gamma")


@dataclass(frozen=True)
class PopulationLaw:
    """Finite list of weighted agent types."""

    atoms: tuple
    gamma_lo: float
    gamma_hi: float
    xi_bound: float = np.inf

    def __post_init__(self):
        atoms = tuple((float(w), a) for w, a in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if not atoms:
            raise ConfigError("population has no atoms", "population.atoms")
        w = self.weights
        if np.any(w <= 0):
            raise ValidationError("atom weights must be positive", "population.weights")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError(f"atom weights sum to {w.sum():.15g}, not 1",
                                  "population.weights")
        if not (0 < self.gamma_lo <= self.gamma_hi):
            raise ValidationError("need 0 < gamma_lo <= gamma_hi", "agent.gamma_bounds")
        for i, (_, a) in enumerate(atoms):
            if not (self.gamma_lo <= a.gamma <= self.gamma_hi):
                raise ValidationError(
                    f"atom {i}: gamma={a.gamma} outside [{self.gamma_lo}, {self.gamma_hi}]",
                    "agent.gamma_bounds")
            if abs(a.xi) > self.xi_bound:
                raise ValidationError(f"atom {i}: |xi| exceeds {self.xi_bound}",
                                      "agent.wealth_bound")

    @classmethod
    def single(cls, agent: AgentType):
        return cls(atoms=((1.0, agent),), gamma_lo=agent.gamma, gamma_hi=agent.gamma)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.atoms])

    @property
    def agents(self) -> list:
        return [a for _, a in self.atoms]

    @property
    def gammas(self) -> np.ndarray:
        return np.array([a.gamma for _, a in self.atoms])

    @property
    def gamma_hat(self) -> float:
        return gamma_hat(self)

    @property
    def liability_sup(self) -> float:
        return max(a.liability.sup_bound for a in self.agents)

    @property
    def all_additive(self) -> bool:
        return all(a.liability.structure_tag == "additive" for a in self.agents)


def gamma_hat(pop) -> float:
    """Harmonic-mean risk aversion 1 / E[1/gamma].

    Accepts a :class:`PopulationLaw` or a sequence of ``(weight, gamma)`` pairs.
    """
    if isinstance(pop, PopulationLaw):
        pairs = [(w, a.gamma) for w, a in pop.atoms]
    else:
        pairs = list(pop)
    if not pairs:
        raise ConfigError("empty population", "population.atoms")
    w = np.array([p[0] for p in pairs], dtype=float)
    g = np.array([p[1] for p in pairs], dtype=float)
    if np.any(g <= 0):
        raise ValidationError("risk aversion must be positive", "agent.gamma_bounds")
    return float(1.0 / np.sum(w / g))


def population_from_pairs(pairs: Sequence, gamma_lo=None, gamma_hi=None) -> PopulationLaw:
    """Convenience: ``[(weight, AgentType), ...]`` with bounds taken from the atoms."""
    g = [a.gamma for _, a in pairs]
    return PopulationLaw(atoms=tuple(pairs),
                         gamma_lo=min(g) if gamma_lo is None else gamma_lo,
                         gamma_hi=max(g) if gamma_hi is None else gamma_hi)
