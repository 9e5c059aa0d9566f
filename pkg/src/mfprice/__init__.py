"""Equilibrium risk premia from mean-field quadratic BSDEs on a noise tree."""
from .errors import (ConfigError, DivergenceError, GridError, MfpriceError, ModelError,
                     NumericalError, OracleFailure, PreconditionError, StepSizeError,
                     ValidationError)
from .lattice import NoiseLattice, PathEnsemble
from .model import AgentType, LiabilitySpec, MarketModel, PopulationLaw, TimeGrid, gamma_hat

__version__ = "0.1.0"
