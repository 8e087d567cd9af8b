import time

import numpy as np
import pytest

from koopman_minset.dynamics import get_system
from koopman_minset.unitnet import TrainingConfig, train


@pytest.fixture(scope="session")
def linear_real():
    return get_system("linear_real")


@pytest.fixture(scope="session")
def training_run(linear_real):
    """The default seeded run on [4,6]x[1,3] and its wall time; shared because it takes ~20 s."""
    start = time.perf_counter()
    trained = train(linear_real, TrainingConfig())
    return trained, time.perf_counter() - start


@pytest.fixture(scope="session")
def trained_real(training_run):
    return training_run[0]


@pytest.fixture(scope="session")
def checkpoint_path(trained_real, tmp_path_factory):
    from koopman_minset.unitnet import save_checkpoint

    path = tmp_path_factory.mktemp("ckpt") / "checkpoint.json"
    save_checkpoint(path, trained_real)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
