import numpy as np
import pytest

from lowshot import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=kernels.available())
def backend(request):
    prev = kernels.BACKEND
    kernels.use(request.param)
    yield request.param
    kernels.use(prev)
