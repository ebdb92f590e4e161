import numpy as np
import pytest

from fedsim.fusion import GlobalModel, ModelUpdate


def make_updates(n, dim, seed=0, round_no=1, submitted_at=0.0):
    rng = np.random.default_rng(seed)
    return [
        ModelUpdate(i, round_no, rng.normal(size=dim), int(rng.integers(1, 500)), submitted_at=submitted_at)
        for i in range(n)
    ]


@pytest.fixture
def updates():
    return make_updates(12, 5)


@pytest.fixture
def model():
    return GlobalModel(1, np.linspace(-1.0, 1.0, 5))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
