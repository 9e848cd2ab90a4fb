import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from milp_moe.instances import GE, LE, binary_instance, knapsack_instance, make_row

sys.path.insert(0, str(Path(__file__).parent))

# derandomized so repeated runs explore identical examples
settings.register_profile("repo", derandomize=True, deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def knapsack3():
    return knapsack_instance([10, 6, 4], [5, 4, 3], 10)


@pytest.fixture
def six_by_four():
    """6 binaries, 4 rows (one GE), mixed-sign objective."""
    return binary_instance("six", "toy", [3, -2, 4, -1, 2, -3], [
        make_row([0, 1, 2], [1, 2, 1], LE, 2),
        make_row([2, 3, 4], [1, 1, 1], LE, 2),
        make_row([0, 4, 5], [2, 1, 1], GE, 1),
        make_row([1, 3, 5], [1, 1, -1], LE, 1),
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_verdicts = []


def pytest_terminal_summary(terminalreporter, config):
    verdicts = sorted(config.acceptance_verdicts)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in verdicts:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] C{n} {title}: {detail}")
