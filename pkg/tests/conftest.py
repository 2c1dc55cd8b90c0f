from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ssmatch.harness import load_preset, lower_bound_instance  # noqa: E402


@pytest.fixture
def inst2():
    return lower_bound_instance()


@pytest.fixture
def lam2():
    return np.array([0.35, 0.30, 0.35])


@pytest.fixture
def standin():
    return load_preset("instance1_standin")


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
