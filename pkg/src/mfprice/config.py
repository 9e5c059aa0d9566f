"""Run configuration: JSON schema, parsing with field paths, model assembly.

Every modeling assumption checked before a run has a named rule id; see
:data:`VALIDATION_RULES`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .lattice import NoiseLattice
from .model import AgentType, LiabilitySpec, MarketModel, PopulationLaw, TimeGrid

SCHEMA_VERSION = 1

VALIDATION_RULES = {
    "market.dimensions": "1 <= n <= d0 and d >= 0",
    "market.rank": "sigma has full row rank n at every common node",
    "market.eigen_bounds": "eigenvalues of sigma sigma^T stay in [lambda_lo, lambda_hi]",
    "market.vol_amplitude": "stochastic-vol scale 1 + a tanh(W0) with |a| < 1 stays positive",
    "market.shape": "sigma evaluates to an n x d0 matrix",
    "agent.gamma_bounds": "every risk aversion lies in [gamma_lo, gamma_hi] with gamma_lo > 0",
    "agent.wealth_bound": "initial wealth is bounded by xi_bound",
    "agent.liability_bound": "the liability never exceeds its declared sup bound",
    "agent.additive_gamma": "an additive liability is built for its own atom's gamma",
    "population.atoms": "the population has at least one atom",
    "population.weights": "atom weights are positive and sum to one",
    "theta.adapted": "the risk premium depends on the common noise only",
    "theta.row_space": "the risk premium lies in the volatility row space",
}

LIABILITY_KINDS = ("constant", "common-sign", "idio-sign", "mixed-sign", "additive", "custom-table")
SHAPES = {"sign": np.sign, "tanh": np.tanh}


def _get(d: dict, key: str, path: str, kind=None, default=...):
    if key not in d:
        if default is ...:
            raise ConfigError("missing field", f"{path}.{key}".lstrip("."))
        return default
    v = d[key]
    if v is None and default is None:
        return None
    if kind is not None and (not isinstance(v, kind) or isinstance(v, bool)):
        raise ConfigError(f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}",
                          f"{path}.{key}".lstrip("."))
    return v


NUM = (int, float)


@dataclass
class GridConfig:
    T: float = 1.0
    K: int = 4


@dataclass
class MarketConfig:
    sigma: list = field(default_factory=lambda: [[1.0]])
    d: int = 1
    vol_amplitude: float = 0.0
    lambda_lo: float | None = None
    lambda_hi: float | None = None


@dataclass
class AtomConfig:
    weight: float
    gamma: float
    liability: dict
    xi: float = 0.0


@dataclass
class PopulationConfig:
    atoms: list
    gamma_lo: float | None = None
    gamma_hi: float | None = None
    xi_bound: float | None = None


@dataclass
class SolverConfig:
    tol: float = 1e-10
    max_iter: int = 50


@dataclass
class ClearingConfig:
    N_list: list = field(default_factory=lambda: [4, 16, 64, 256])
    outer_samples: int = 4000


@dataclass
class RunConfig:
    grid: GridConfig
    market: MarketConfig
    population: PopulationConfig
    theta: list | float = 0.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    clearing: ClearingConfig = field(default_factory=ClearingConfig)
    seed: int = 0
    output: str = "out"
    schema_version: int = SCHEMA_VERSION

    # parsing -----------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("top level must be an object")
        ver = _get(d, "schema_version", "", int)
        if ver != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {ver}", "schema_version")
        g = _get(d, "grid", "", dict)
        grid = GridConfig(float(_get(g, "T", "grid", NUM)), _get(g, "K", "grid", int))
        m = _get(d, "market", "", dict)
        market = MarketConfig(
            sigma=_get(m, "sigma", "market", list),
            d=_get(m, "d", "market", int, 1),
            vol_amplitude=float(_get(m, "vol_amplitude", "market", NUM, 0.0)),
            lambda_lo=_get(m, "lambda_lo", "market", NUM, None),
            lambda_hi=_get(m, "lambda_hi", "market", NUM, None))
        try:
            sig = np.array(market.sigma, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"not a numeric matrix ({exc})", "market.sigma") from None
        if sig.ndim != 2:
            raise ConfigError("must be a list of rows", "market.sigma")
        p = _get(d, "population", "", dict)
        atoms = []
        for i, a in enumerate(_get(p, "atoms", "population", list)):
            path = f"population.atoms[{i}]"
            if not isinstance(a, dict):
                raise ConfigError("expected object", path)
            atoms.append(AtomConfig(float(_get(a, "weight", path, NUM)), float(_get(a, "gamma", path, NUM)),
                                    _get(a, "liability", path, dict),
                                    float(_get(a, "xi", path, NUM, 0.0))))
            _check_liability_spec(atoms[-1].liability, f"{path}.liability")
        pop = PopulationConfig(atoms, _get(p, "gamma_lo", "population", NUM, None),
                               _get(p, "gamma_hi", "population", NUM, None),
                               _get(p, "xi_bound", "population", NUM, None))
        s = _get(d, "solver", "", dict, {})
        solver = SolverConfig(float(_get(s, "tol", "solver", NUM, 1e-10)),
                              _get(s, "max_iter", "solver", int, 50))
        c = _get(d, "clearing", "", dict, {})
        clearing = ClearingConfig(_get(c, "N_list", "clearing", list, [4, 16, 64, 256]),
                                  _get(c, "outer_samples", "clearing", int, 4000))
        if not all(isinstance(n, int) and n >= 1 for n in clearing.N_list):
            raise ConfigError("entries must be positive integers", "clearing.N_list")
        theta = _get(d, "theta", "", (int, float, list), 0.0)
        seed = _get(d, "seed", "", int, 0)
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError("must be an unsigned 64-bit integer", "seed")
        return cls(grid, market, pop, theta, solver, clearing, seed,
                   _get(d, "output", "", str, "out"), ver)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    # assembly ----------------------------------------------------------
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.grid.T, self.grid.K)

    def build_market(self) -> MarketModel:
        m = self.market
        return MarketModel.constant(np.array(m.sigma, dtype=float), d=m.d, lambda_lo=m.lambda_lo,
                                    lambda_hi=m.lambda_hi, vol_amplitude=m.vol_amplitude)

    def build_population(self, lattice: NoiseLattice | None = None) -> PopulationLaw:
        grid = self.time_grid()
        atoms = []
        for i, a in enumerate(self.population.atoms):
            F = build_liability(a.liability, a.gamma, grid, f"population.atoms[{i}].liability")
            atoms.append((a.weight, AgentType(a.xi, a.gamma, F)))
        g = [a.gamma for a in self.population.atoms]
        p = self.population
        return PopulationLaw(tuple(atoms),
                             min(g) if p.gamma_lo is None else p.gamma_lo,
                             max(g) if p.gamma_hi is None else p.gamma_hi,
                             np.inf if p.xi_bound is None else p.xi_bound)

    def build(self, max_nodes: int = 2 ** 26):
        """Validate every assumption and return ``(lattice, market, population)``."""
        market = self.build_market()
        lattice = NoiseLattice(self.time_grid(), market.d0, market.d, max_nodes=max_nodes)
        for k in range(lattice.steps):
            sig = lattice.sigma(market, k)
            market.check_bounds(sig)
            lattice.projectors(market, k)        # rank check
        pop = self.build_population(lattice)
        return lattice, market, pop


def _check_liability_spec(spec: dict, path: str) -> None:
    kind = _get(spec, "kind", path, str)
    if kind not in LIABILITY_KINDS:
        raise ConfigError(f"unknown kind {kind!r}; expected one of {', '.join(LIABILITY_KINDS)}",
                          f"{path}.kind")
    if kind in ("constant", "common-sign", "idio-sign", "mixed-sign"):
        _get(spec, "amplitude", path, NUM)
    elif kind == "additive":
        for part in ("common", "idio"):
            sub = _get(spec, part, path, dict)
            shape = _get(sub, "shape", f"{path}.{part}", str)
            if shape not in SHAPES:
                raise ConfigError(f"unknown shape {shape!r}", f"{path}.{part}.shape")
            _get(sub, "amplitude", f"{path}.{part}", NUM)
    else:
        noise = _get(spec, "noise", path, str)
        if noise not in ("common", "idio"):
            raise ConfigError("must be 'common' or 'idio'", f"{path}.noise")
        vals = _get(spec, "values", path, list)
        if not vals or not all(isinstance(v, NUM) and not isinstance(v, bool) for v in vals):
            raise ConfigError("must be a nonempty list of numbers", f"{path}.values")


def _terminal(w):
    return np.asarray(w)[..., -1, 0]


def build_liability(spec: dict, gamma: float, grid: TimeGrid, path: str = "liability") -> LiabilitySpec:
    """Turn a liability entry of the config into a :class:`LiabilitySpec`.

    ``custom-table`` lists values by the number of up-moves of the first
    coordinate of the chosen noise at maturity (``K + 1`` entries).
    """
    _check_liability_spec(spec, path)
    kind = spec["kind"]
    if kind == "constant":
        return LiabilitySpec.constant(float(spec["amplitude"]))
    if kind == "common-sign":
        return LiabilitySpec.common_sign(float(spec["amplitude"]))
    if kind == "idio-sign":
        return LiabilitySpec.idio_sign(float(spec["amplitude"]))
    if kind == "mixed-sign":
        return LiabilitySpec.mixed_sign(float(spec["amplitude"]))
    if kind == "additive":
        c, i = spec["common"], spec["idio"]
        fc, ac = SHAPES[c["shape"]], float(c["amplitude"])
        fi, ai = SHAPES[i["shape"]], float(i["amplitude"])
        return LiabilitySpec.additive(lambda w0: ac * fc(_terminal(w0)),
                                      lambda w1: ai * fi(_terminal(w1)), gamma, abs(ac), abs(ai),
                                      label=f"additive({c['shape']}:{ac},{i['shape']}:{ai})")
    vals = np.array(spec["values"], dtype=float)
    K, sq = grid.steps, np.sqrt(grid.dt)
    if vals.size != K + 1:
        raise ConfigError(f"needs K + 1 = {K + 1} values, got {vals.size}", f"{path}.values")

    def table(w):
        j = np.rint((_terminal(w) / sq + K) / 2).astype(int)
        return vals[np.clip(j, 0, K)]

    bound = float(np.max(np.abs(vals)))
    if spec["noise"] == "common":
        return LiabilitySpec.common(table, bound, label="custom-table(common)")
    return LiabilitySpec.idio(table, bound, label="custom-table(idio)")


def theta_spec(cfg: RunConfig, d0: int):
    t = np.asarray(cfg.theta, dtype=float)
    if t.ndim > 1 or (t.ndim == 1 and t.size != d0):
        raise ConfigError(f"must be a scalar or a vector of length d0 = {d0}", "theta")
    return np.broadcast_to(t, (d0,)).copy()


def regime_label(pop: PopulationLaw) -> str:
    """'in-theory' when the liability is below the contraction threshold, else 'exploratory'."""
    from .meanfield import GammaConstants
    return "in-theory" if GammaConstants.from_population(pop).in_theory else "exploratory"

