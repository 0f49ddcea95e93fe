import numpy as np
import pytest

from polcavity.cavity import REFERENCE_CAVITY, REFERENCE_ETA_IN, CouplingConfig
from polcavity.polarization import D, H, V
from polcavity.tomography import NOISELESS, NoiseModel, ScanConfig, simulate_scan

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def reference_params():
    return REFERENCE_CAVITY


@pytest.fixture
def scan_grid():
    return np.linspace(-300.0, 300.0, 200)


def make_scan(state, eta_in=REFERENCE_ETA_IN, params=REFERENCE_CAVITY, grid=None, noise=NOISELESS, seed=0):
    if grid is None:
        grid = np.linspace(-300.0, 300.0, 200)
    return simulate_scan(params, CouplingConfig(eta_in, state), ScanConfig(grid, 1.0, noise, seed))


@pytest.fixture
def scans():
    """Noiseless H, V and D scans at the reference parameters."""
    return make_scan(H), make_scan(V), make_scan(D)


ONE_PERCENT = NoiseModel("gaussian-relative", 0.01)
