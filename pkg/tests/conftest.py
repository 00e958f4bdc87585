import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mbrobust.classifier import ArchConfig, init_classifier

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = ArchConfig(n_classes=5, conv1_channels=4, conv2_channels=6, hidden=8)


@pytest.fixture
def tiny_params():
    return init_classifier(0, 5, (3, 32, 32), TINY)


@pytest.fixture
def batch():
    rng = np.random.default_rng(1)
    return rng.uniform(0, 1, (6, 3, 32, 32)).astype(np.float32), rng.integers(0, 5, 6)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
