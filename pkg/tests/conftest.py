import numpy as np
import pytest

from expsqlab.lattice import LatticeConfig


@pytest.fixture
def lat2():
    return LatticeConfig(2, 64, 8.0)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(1234)))
