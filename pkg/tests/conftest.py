import numpy as np
import pytest

from grape import _backend


@pytest.fixture
def rng(request):
    # one stream per test, stable across runs and test ordering
    import zlib
    return np.random.default_rng(zlib.crc32(request.node.nodeid.encode()))


@pytest.fixture(params=_backend.available())
def backend(request):
    with _backend.use_backend(request.param):
        yield request.param
