"""Shared fixtures and the acceptance-summary reporter."""

import numpy as np
import pytest

import sapmap as sm

ACCEPTANCE_RESULTS = []


def record_criterion(number, name, passed, detail=""):
    """Collect one acceptance-criterion verdict for the terminal summary."""
    ACCEPTANCE_RESULTS.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number} [{status}] {name}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_cloud(rng):
    pts = rng.normal(size=(200, 3))
    colors = rng.integers(0, 256, (200, 3)).astype(np.uint8)
    return sm.PointCloud(pts, colors, "M1")
