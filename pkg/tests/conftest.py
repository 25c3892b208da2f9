import numpy as np
import pytest

from fiode.models import ClassifierModel


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_model(rng):
    """Untrained 3-class dynamics model on 2-D inputs, dense layers."""
    return ClassifierModel.init(rng, 3, 2, hidden=16, orthogonal=False)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
