import numpy as np
import pytest

from kalmanhj.config import preset_frame
from kalmanhj.scenarios import random_controllable_pair


@pytest.fixture
def kolmogorov():
    return preset_frame("kolmogorov2").frame


@pytest.fixture
def chain3():
    return preset_frame("chain-3").frame


@pytest.fixture
def random_frame():
    return random_controllable_pair(np.random.default_rng(20240611), max_N=5)[2]
