import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from frag.cache import CacheConfig, build_pivots
from frag.he import CipherParams, keygen

settings.register_profile("frag", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow])
settings.load_profile("frag")

KEY_SEED = 7


@pytest.fixture(scope="session")
def params():
    return CipherParams().validate()


@pytest.fixture(scope="session")
def keys(params):
    return keygen(params, KEY_SEED)


@pytest.fixture(scope="session")
def pk(keys):
    return keys[0]


@pytest.fixture(scope="session")
def sk(keys):
    return keys[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cache(pk):
    cfg = CacheConfig(pivot_count=16, frac_bits=10, zero_pool_size=64, capacity=4096)
    return build_pivots(pk, cfg, auto_refill=False, rng=np.random.default_rng(5))


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def verdicts(request):
    return request.config.stash.setdefault(_VERDICTS, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
