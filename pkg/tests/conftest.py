import numpy as np
import pytest

from superfed.nn import NetworkSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return NetworkSpec((2, 4, 3))
