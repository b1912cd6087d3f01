import numpy as np
import pytest

from flownav.fixtures import obstacle_channel, y_bifurcation
from flownav.fvm import solve_steady
from flownav.grid import FluidProps, straight_channel


@pytest.fixture(scope="session")
def poiseuille_mask():
    return straight_channel(128, 32, 1e-5, 1e-3)


@pytest.fixture(scope="session")
def poiseuille(poiseuille_mask):
    return solve_steady(poiseuille_mask, FluidProps())


@pytest.fixture(scope="session")
def y_mask():
    return y_bifurcation()


@pytest.fixture(scope="session")
def y_solution(y_mask):
    return solve_steady(y_mask, FluidProps())


@pytest.fixture(scope="session")
def small_obstacle():
    mask = obstacle_channel(48, 20, v_inlet=0.02, size=4)
    field, report = solve_steady(mask, FluidProps())
    assert report.converged
    return mask, field


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
