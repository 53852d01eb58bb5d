import numpy as np
import pytest
from hypothesis import settings

from harvestnet.data import SynthConfig
from harvestnet.simulate import Scenario

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    return SynthConfig(n_rounds=3, steps_per_round=200, test_size=200, n_seed_nontarget=40, seed=11)


@pytest.fixture(scope="session")
def small_scenario(small_synth):
    return Scenario.from_synth(small_synth)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
