import pytest

from fockspace import PhaseGrid
from transport import TransportSpec


@pytest.fixture
def line4():
    return PhaseGrid(4, 0.25)


@pytest.fixture
def line8():
    return PhaseGrid(8, 0.125)


@pytest.fixture
def phase4():
    return PhaseGrid(4, 0.25, velocity_cells=8, velocity_cutoff=6.0)


@pytest.fixture
def free():
    return TransportSpec()
