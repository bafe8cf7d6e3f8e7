import numpy as np
import pytest

from nullheat import (CoefficientSet, Geometry, TimeGrid, build_mesh,
                      build_tree)


@pytest.fixture
def interval_geom():
    return Geometry("interval", 0.0, 1.0, control=(0.3, 0.7))


@pytest.fixture
def interval_mesh(interval_geom):
    return build_mesh(interval_geom, n_x=9)


@pytest.fixture
def interval_mesh_17(interval_geom):
    return build_mesh(interval_geom, n_x=17)


@pytest.fixture
def disk_geom():
    return Geometry("disk", radius=1.0, control=(0.4, 0.8))


@pytest.fixture
def disk_mesh(disk_geom):
    return build_mesh(disk_geom, n_r=8, n_theta=16)


@pytest.fixture
def grid4():
    return TimeGrid(1.0, 4)


@pytest.fixture
def grid8():
    return TimeGrid(1.0, 8)


@pytest.fixture
def tree4():
    return build_tree(4, 1.0)


@pytest.fixture
def tree8():
    return build_tree(8, 1.0)


@pytest.fixture
def zero_coeffs():
    return CoefficientSet.zero()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
