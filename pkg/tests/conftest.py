import numpy as np
import pytest

from stoplab.paths import TimeGrid
from stoplab.stopderiv import ShrinkFamily
from stoplab.theorems import Scenario

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def record(criterion, ok, detail):
    ACCEPTANCE_LINES.append((criterion, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {crit:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def small_grid():
    return TimeGrid(1e-3, 1000)


@pytest.fixture
def small_scenario():
    return Scenario(seed=7, grid=TimeGrid(1e-3, 1000), family=ShrinkFamily(initial=0.1, levels=3),
                    n_outer=12, M=200, n_paths=200)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
