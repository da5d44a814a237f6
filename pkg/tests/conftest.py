import numpy as np
import pytest

import rootsep as rs


@pytest.fixture(scope="session")
def gauss_family():
    return rs.GaussianShiftFamily(1.0)


@pytest.fixture(scope="session")
def two_atom_family():
    # mu_0 = delta_0, mu_1 = (delta_-1 + delta_1)/2
    return rs.ThreePointFamily(0.0, 0.5)


@pytest.fixture(scope="session")
def three_point_family():
    return rs.ThreePointFamily(0.1, 0.3)


@pytest.fixture(scope="session")
def constant_family():
    atoms = rs.AtomicMeasure(np.array([-1.0, 1.0]), np.array([0.5, 0.5]))
    return rs.AtomicTableFamily([(0.0, atoms)])


@pytest.fixture(scope="session")
def gauss_surface_small(gauss_family):
    """Four-layer Gaussian solve on a modest grid, shared by many tests."""
    part = rs.make_partition(4, "uniform")
    grid = rs.make_grid(gauss_family, 1.25, 0.05)
    return rs.solve_layers(gauss_family, part, grid)


@pytest.fixture(scope="session")
def two_atom_surface(two_atom_family):
    part = rs.make_partition(1, "uniform")
    grid = rs.make_grid(two_atom_family, 7.0, 0.1)
    return rs.solve_layers(two_atom_family, part, grid)
