import sys

import numpy as np
import pytest

from rare_sorm.instanton import OptimizerConfig, find_instanton, find_instanton_mgf
from rare_sorm.models import additive_ou, geometric_bm, predator_prey

TIGHT = OptimizerConfig(grad_tol=1e-8, constraint_tol=1e-9)


class _Cache:
    """Instantons are the expensive part of most tests; solve each once."""

    def __init__(self):
        self.store = {}

    def get(self, key, build):
        if key not in self.store:
            self.store[key] = build()
        return self.store[key]


@pytest.fixture(scope="session")
def cache():
    return _Cache()


@pytest.fixture(scope="session")
def pp():
    return predator_prey()


@pytest.fixture(scope="session")
def pp_instanton(pp, cache):
    system, obs = pp

    def get(z, n_t, config=None):
        cfg = config or OptimizerConfig()
        key = ("pp", z, n_t, cfg.grad_tol, cfg.constraint_tol)
        return cache.get(key, lambda: find_instanton(system, obs, system.grid(n_t), z, cfg))

    return get


@pytest.fixture(scope="session")
def gbm_mgf(cache):
    system, obs = geometric_bm()

    def get(n_t=1000, lam=-1.0):
        grid = system.grid(n_t)
        sol = cache.get(("gbm", n_t, lam), lambda: find_instanton_mgf(
            system, obs, grid, lam, OptimizerConfig(grad_tol=1e-9)))
        return system, obs, grid, sol

    return get


@pytest.fixture(scope="session")
def ou():
    return additive_ou()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
