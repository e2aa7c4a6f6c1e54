import sys

import numpy as np
import pytest

from shapereplay.config import ExperimentConfig
from shapereplay.segmodel import Encoder
from shapereplay.seeds import seed_for
from shapereplay.shapeworld import default_world, generate_task_dataset, protocol_from_sizes


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance pass/fail lines where capture cannot hide them."""
    for name, mod in sys.modules.items():
        if name.endswith("test_acceptance"):
            lines = getattr(mod, "ACCEPTANCE_LINES", [])
            if lines:
                terminalreporter.write_sep("-", "acceptance criteria")
                for line in lines:
                    terminalreporter.write_line(line)
            break


@pytest.fixture(scope="session")
def world():
    return default_world()


@pytest.fixture(scope="session")
def protocol():
    return protocol_from_sizes((4, 2, 2), "disjoint", (20, 12, 12))


@pytest.fixture(scope="session")
def step0_data(world, protocol):
    return generate_task_dataset(world, protocol, 0, 20, seed_for(7, "task", 0))


@pytest.fixture(scope="session")
def encoder(step0_data):
    enc = Encoder()
    enc.fit(step0_data.images)
    enc.freeze()
    return enc


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def tiny_config():
    """A configuration small enough for end-to-end tests in seconds."""
    return ExperimentConfig(
        seed=5,
        group_sizes=(2, 1),
        samples_per_step=(16, 10),
        test_samples=24,
        num_classes=3,
        pool_per_class=40,
        replay_per_class=8,
        steps_per_class=40,
        disc_epochs=4,
    )
