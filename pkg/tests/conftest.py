import numpy as np
import pytest

from stableavg.drifts import make_drift
from stableavg.stable_noise import ModeSpectrum, SeedLineage


@pytest.fixture
def heat():
    return ModeSpectrum.heat(8, 0.35)


@pytest.fixture
def drifts():
    B = make_drift("B", "trig", 8, sx=1.0, cy=1.0)
    F = make_drift("F", "trig", 8, sx=1.0, sy=0.5)
    return B, F


@pytest.fixture
def rng():
    return SeedLineage(11, 0, "tests").rng()


@pytest.fixture
def e1():
    v = np.zeros(8)
    v[0] = 1.0
    return v


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
