import sys

import numpy as np
import pytest
from hypothesis import settings

from mfprice.model import AgentType, LiabilitySpec, MarketModel, PopulationLaw, TimeGrid
from mfprice.lattice import NoiseLattice

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def terminal(w):
    return np.asarray(w)[..., -1, 0]


@pytest.fixture
def market():
    return MarketModel.constant(np.array([[1.0]]))


def tree(K, T=1.0, d0=1, d=1):
    return NoiseLattice(TimeGrid(T, K), d0=d0, d=d)


def two_atom_population(amplitude=0.04, gammas=(1.0, 2.0)):
    F = LiabilitySpec.mixed_sign(amplitude)
    atoms = tuple((0.5, AgentType(0.0, g, F)) for g in gammas)
    return PopulationLaw(atoms, min(gammas), max(gammas))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
