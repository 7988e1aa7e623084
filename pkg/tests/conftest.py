import numpy as np
import pytest

from linefdi.design import design_filter
from linefdi.io import load_line_config
from linefdi.sim import add_noise, run_event_table


@pytest.fixture(scope="session")
def line():
    return load_line_config("builtin:table1")


@pytest.fixture(scope="session")
def design(line):
    return design_filter(line, 1e-4, 0.1)


@pytest.fixture(scope="session")
def table_waveforms(line):
    """Noiseless full event schedule at 100 us."""
    return run_event_table(line)


@pytest.fixture(scope="session")
def noisy_waveforms(table_waveforms):
    return add_noise(table_waveforms, 0.02, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
