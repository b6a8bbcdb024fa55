import numpy as np
import pytest

from mrag import kernels

BACKENDS = [pytest.param(kernels.pure, id="python")]
if kernels.compiled is not None:
    BACKENDS.append(pytest.param(kernels.compiled, id="cython"))


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
