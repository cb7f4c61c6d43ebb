import numpy as np
import pytest

from discorl.arena import ArenaConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    # 16 px renders keep the conv stacks cheap in unit tests
    return ArenaConfig(task="TR", render_size=16, marker_half_size=0.25)


ACCEPTANCE_LINES = {}


@pytest.fixture
def record_criterion():
    """``record_criterion(n, passed, detail)`` stores the line shown in the terminal summary."""
    def record(n, passed, detail):
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
