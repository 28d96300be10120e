import time

import numpy as np
import pytest

from fwdguide.diffusion import make_schedule
from fwdguide.evaluation import make_moons
from fwdguide.model import init_params, train
from fwdguide.numerics import RngState


@pytest.fixture(scope="session")
def sched():
    return make_schedule(100)


@pytest.fixture(scope="session")
def small_model(sched):
    """Untrained but fixed network; good enough wherever only calculus is checked."""
    return init_params(RngState(3, "test-model"), sched.T, freqs=4, hidden=16)


@pytest.fixture(scope="session")
def moons():
    return make_moons(5000, 0.05, seed=0)


@pytest.fixture(scope="session")
def _training_run(moons, sched):
    t0 = time.perf_counter()
    params, report = train(moons, sched, steps=4000, batch=128, seed=7)
    return params, report, time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained(_training_run):
    """The toy-experiment denoiser: 4000 Adam steps, batch 128, seed 7."""
    return _training_run[:2]


@pytest.fixture(scope="session")
def train_seconds(_training_run):
    return _training_run[2]


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)
