import numpy as np
import pytest

from oausim.jesd.kernels import BACKENDS


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    """Kernel set for one backend; every kernel test runs on both."""
    return BACKENDS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
