import logging

import numpy as np
import pytest

from dfpt.groundstate import GroundState
from dfpt.model import LocalPotential

from .cases import ModelCase, random_case, random_perturbation

logger = logging.getLogger(__name__)
logging.basicConfig(level=logging.INFO)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def metal() -> ModelCase:
    return random_case(7)


@pytest.fixture
def metal_gs(metal: ModelCase) -> GroundState:
    return metal.prepare()


@pytest.fixture
def two_channel() -> ModelCase:
    return random_case(11, n_channels=2, n_el=2.5)


@pytest.fixture
def dV() -> LocalPotential:
    return random_perturbation(0)
