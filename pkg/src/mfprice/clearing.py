"""Finite-population market clearing under the mean-field risk premium.

``N`` agents are drawn i.i.d. given the common path: an atom from the
population law and an independent idiosyncratic tree path. Every agent trades
its optimal position under ``theta_mfg``; the quantity of interest is the
squared per-capita excess demand ``E int_0^T |N^-1 sum_i pi^i_t|^2 dt``.

Agents sharing an atom share one BSDE solution, so a sample costs an index
gather, not ``N`` solves.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bsde import optimal_strategy, solve_agent_bsde, theta_path
from .errors import PreconditionError
from .lattice import NoiseLattice
from .model import MarketModel, PopulationLaw

CHUNK = 256
DEGENERATE_FLOOR = 1e-20


@dataclass
class AtomPositions:
    """Optimal positions of every atom: ``pi[k]`` is ``(A, n_common(k), n_idio(k), n)``."""

    pi: list = field(repr=False)
    p: list = field(repr=False)
    weights: np.ndarray


def atom_positions(lattice: NoiseLattice, market: MarketModel, pop: PopulationLaw,
                   theta_mfg) -> AtomPositions:
    """Solve each atom's BSDE under ``theta_mfg`` and return its positions."""
    thetas = theta_path(lattice, theta_mfg)
    pis, ps = [], []
    for agent in pop.agents:
        sol = solve_agent_bsde(lattice, market, agent, thetas)
        st = optimal_strategy(sol, thetas, agent.gamma, market)
        pis.append(st.pi)
        ps.append(st.p)
    K = lattice.steps
    return AtomPositions([np.stack([pi[k] for pi in pis]) for k in range(K)],
                         [np.stack([p[k] for p in ps]) for k in range(K)], pop.weights)


def _chunk_sums(lattice: NoiseLattice, pos: AtomPositions, N: int, size: int, seq) -> np.ndarray:
    rng = np.random.default_rng(seq)
    K = lattice.steps
    nc, ni = lattice.shape(K)
    c = rng.integers(nc, size=size)
    atoms = rng.choice(len(pos.weights), size=(size, N), p=pos.weights)
    idio = rng.integers(ni, size=(size, N))
    out = np.zeros(size)
    for k in range(K):
        ck = c // lattice.b0 ** (K - k)
        ik = idio // lattice.b1 ** (K - k)
        agg = pos.pi[k][atoms, ck[:, None], ik].mean(axis=1)     # (size, n)
        out += np.sum(agg ** 2, axis=-1) * lattice.dt
    return out


def simulate_clearing(lattice: NoiseLattice, market: MarketModel, pop: PopulationLaw, theta_mfg,
                      N: int, outer_samples: int, seed: int = 0, threads: int = 1,
                      positions: AtomPositions | None = None):
    """Monte Carlo estimate of ``E int |N^-1 sum pi^i|^2 dt`` and its standard error.

    Outer samples are split into fixed chunks of :data:`CHUNK`, each with its
    own substream keyed by ``(seed, N, chunk)``; the result does not depend on
    ``threads``.
    """
    if N < 1:
        raise PreconditionError("need N >= 1", "clearing.N")
    if outer_samples < 2:
        raise PreconditionError("need at least two outer samples", "clearing.outer_samples")
    if positions is None:
        positions = atom_positions(lattice, market, pop, theta_mfg)
    sizes = [min(CHUNK, outer_samples - s) for s in range(0, outer_samples, CHUNK)]
    seqs = [np.random.SeedSequence(seed, spawn_key=(N, j)) for j in range(len(sizes))]
    job = lambda args: _chunk_sums(lattice, positions, N, *args)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(job, zip(sizes, seqs)))
    else:
        parts = [job(a) for a in zip(sizes, seqs)]
    x = np.concatenate(parts)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def exact_clearing_error(lattice: NoiseLattice, positions: AtomPositions, N: int) -> float:
    """Tree value of the clearing error, using conditional i.i.d. structure.

    Given the common node, ``E|avg|^2 = |m|^2 + (s - |m|^2) / N`` with ``m``
    and ``s`` the first and second moments over atoms and idiosyncratic nodes.
    """
    total = 0.0
    for pi in positions.pi:
        m = np.tensordot(positions.weights, pi, axes=(0, 0)).mean(axis=1)          # (nc, n)
        s = np.tensordot(positions.weights, np.sum(pi ** 2, axis=-1), axes=(0, 0)).mean(axis=1)
        m2 = np.sum(m ** 2, axis=-1)
        total += float(np.mean(m2 + (s - m2) / N)) * lattice.dt
    return total


@dataclass
class ClearingRow:
    N: int
    estimate: float
    stderr: float
    n_outer: int


@dataclass
class ClearingReport:
    rows: list
    slope: float | None = None
    intercept: float | None = None
    warning: str = ""

    @property
    def N_list(self) -> list:
        return [r.N for r in self.rows]

    @property
    def estimates(self) -> np.ndarray:
        return np.array([r.estimate for r in self.rows])

    @property
    def max_relative_stderr(self) -> float:
        return max(r.stderr / r.estimate if r.estimate > 0 else np.inf for r in self.rows)


def fit_rate(N_list, estimates):
    """Least-squares ``log(estimate) = intercept + slope * log(N)``."""
    slope, intercept = np.polyfit(np.log(N_list), np.log(estimates), 1)
    return float(slope), float(intercept)


def clearing_sweep(lattice: NoiseLattice, market: MarketModel, pop: PopulationLaw, theta_mfg,
                   N_list, outer_samples: int, seed: int = 0, threads: int = 1) -> ClearingReport:
    """Run :func:`simulate_clearing` over ``N_list`` and fit the decay rate.

    If any estimate is at or below :data:`DEGENERATE_FLOOR` the slope is
    omitted and a warning is attached (the symmetric case clears exactly).
    """
    N_list = [int(n) for n in N_list]
    if len(N_list) < 3 or any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise PreconditionError("N_list needs at least 3 strictly increasing values", "clearing.N_list")
    if N_list[-1] < 16 * N_list[0]:
        raise PreconditionError("N_list must span a factor of at least 16", "clearing.N_list")
    pos = atom_positions(lattice, market, pop, theta_mfg)
    rows = []
    for N in N_list:
        est, se = simulate_clearing(lattice, market, pop, theta_mfg, N, outer_samples, seed,
                                    threads, positions=pos)
        rows.append(ClearingRow(N, est, se, outer_samples))
    report = ClearingReport(rows)
    if min(r.estimate for r in rows) <= DEGENERATE_FLOOR:
        report.warning = "degenerate fit: some estimates vanish; slope omitted"
        warnings.warn(report.warning, RuntimeWarning, stacklevel=2)
    else:
        report.slope, report.intercept = fit_rate(N_list, report.estimates)
    return report


# --------------------------------------------------------------------------
# the naive finite-N premium


@dataclass
class FiniteNTheta:
    """Per-replicate naive premium ``theta[r, c]`` at one step.

    ``idio_variation`` is the largest spread, over common nodes, of the value
    across replicates that differ only in the agents' idiosyncratic positions:
    a nonzero value means the premium is not a function of the common noise.
    """

    theta: np.ndarray = field(repr=False)
    idio_variation: float

    def rms_error(self, theta_mfg_k: np.ndarray) -> float:
        return float(np.sqrt(np.mean(np.sum((self.theta - theta_mfg_k[None]) ** 2, axis=-1))))


def finite_n_theta(z0_par: np.ndarray, gammas: np.ndarray, idio_idx: np.ndarray) -> FiniteNTheta:
    """``theta = -(mean 1/gamma_j)^-1 mean_j Z^{j,0,par}`` node by node.

    Parameters
    ----------
    z0_par : (N, n_common, n_idio, d0)
        Each agent's traded integrand on the step grid.
    gammas : (N,)
    idio_idx : (R, N) int
        Replicates of the agents' idiosyncratic node at this step.
    """
    z0_par = np.asarray(z0_par, dtype=float)
    g = np.asarray(gammas, dtype=float)
    idio_idx = np.atleast_2d(idio_idx)
    N = z0_par.shape[0]
    gh_n = 1.0 / np.mean(1.0 / g)
    # (R, N, nc, d0): agent j read at its own idiosyncratic node
    vals = z0_par[np.arange(N)[None, :], :, idio_idx]
    theta = -gh_n * vals.mean(axis=1)
    spread = theta.max(axis=0) - theta.min(axis=0) if theta.shape[0] > 1 else np.zeros_like(theta[0])
    return FiniteNTheta(theta, float(np.max(np.linalg.norm(spread, axis=-1), initial=0.0)))


def sample_finite_n_theta(lattice: NoiseLattice, mf, pop: PopulationLaw, k: int, N: int,
                          replicates: int, seed: int = 0, redraw_atoms: bool = False) -> FiniteNTheta:
    """Draw ``N`` agents from ``pop`` and evaluate the naive premium at step ``k``.

    By default the atoms are held fixed and only the idiosyncratic nodes are
    redrawn per replicate, which isolates the dependence on idiosyncratic
    noise. With ``redraw_atoms`` every replicate is a fresh population.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(N, k)))
    z = mf.representative.Z0_par[k]
    idx = rng.integers(lattice.n_idio(k), size=(replicates, N))
    if not redraw_atoms:
        atoms = rng.choice(len(pop.weights), size=N, p=pop.weights)
        return finite_n_theta(z[atoms], pop.gammas[atoms], idx)
    atoms = rng.choice(len(pop.weights), size=(replicates, N), p=pop.weights)
    vals = z[atoms, :, idx]                                     # (R, N, nc, d0)
    gh_n = 1.0 / np.mean(1.0 / pop.gammas[atoms], axis=1)       # (R,)
    theta = -gh_n[:, None, None] * vals.mean(axis=1)
    return FiniteNTheta(theta, float("nan"))
