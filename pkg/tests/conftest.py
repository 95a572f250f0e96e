import warnings

import numpy as np
import pytest
from hypothesis import settings

from clssem.model import Dataset, parse_model
from clssem.optimizer import OptimizerConfig

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

REGRESSION_TEXT = """\
latent: Z
manifest: x, y
param: a
eq x: x = Z
eq y: y = a*Z
"""


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@pytest.fixture
def regression_model():
    return parse_model(REGRESSION_TEXT)


@pytest.fixture
def fast_cfg():
    return OptimizerConfig(multistart=1, seed=0)


def regression_data(n, seed, slope=0.8, noise=0.3):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal(n)
    return Dataset.from_mapping({"x": X + noise * rng.standard_normal(n),
                                 "y": slope * X + noise * rng.standard_normal(n)})


def central_difference(f, u, h=1e-6):
    g = np.zeros_like(u)
    for j in range(u.size):
        e = np.zeros_like(u)
        e[j] = h
        g[j] = (f(u + e) - f(u - e)) / (2 * h)
    return g


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
