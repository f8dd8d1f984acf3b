import pytest

from gfsim.config import BENCHMARK_INERTIA
from gfsim.converter import VscParams
from gfsim.engine import build_system
from gfsim.powergrid import kundur_4vsc


def benchmark_params(**overrides):
    return {name: VscParams(h=h, **overrides) for name, h in BENCHMARK_INERTIA.items()}


@pytest.fixture(scope="session")
def grid():
    return kundur_4vsc()


@pytest.fixture(scope="session")
def system(grid):
    return build_system(grid, benchmark_params())
