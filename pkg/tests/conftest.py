import sys

import numpy as np
import pytest

from glab import build_schedule, ring_model, uniform_grid
from glab.score_model import GaussianMixtureModel


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture(scope="session")
def ring():
    return ring_model()


@pytest.fixture(scope="session")
def grid50(sched):
    return uniform_grid(sched, 50)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def gauss1():
    """Single 2-D Gaussian; every denoiser is affine in x."""
    return GaussianMixtureModel([[0.7, -0.4]], 0.5, [1.0])


@pytest.fixture(scope="session")
def random_model():
    g = np.random.default_rng(7)
    means = g.normal(size=(5, 2)) * 1.5
    w = g.uniform(0.5, 1.5, size=5)
    return GaussianMixtureModel(means, 0.3, w / w.sum())


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod and mod.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(mod.VERDICTS):
            terminalreporter.write_line(mod.VERDICTS[n])
