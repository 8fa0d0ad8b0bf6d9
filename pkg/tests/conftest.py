import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lndet.phantom import PhantomConfig, generate_study  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    lines = test_acceptance.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_phantom():
    return PhantomConfig(dims=(48, 48, 8), spacing_mm=(2.0, 2.0, 4.0), nodes_per_study=(1, 2), seed=3)


@pytest.fixture(scope="session")
def train_study(small_phantom):
    return generate_study(small_phantom, 0, "train")


@pytest.fixture(scope="session")
def test_study(small_phantom):
    return generate_study(small_phantom, 1, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
