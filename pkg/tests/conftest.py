import numpy as np
import pytest

from arxlab.system import ArxSystem, NoiseSpec


@pytest.fixture
def scalar():
    return ArxSystem.scalar()


@pytest.fixture
def scalar_noiseless():
    return ArxSystem.scalar(noise=NoiseSpec.make(1, "none"))


@pytest.fixture
def rng():
    return np.random.default_rng(20261014)
