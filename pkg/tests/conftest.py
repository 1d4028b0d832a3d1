"""
Shared meshes for the test suite.
"""
import numpy as np
import pytest

from src.mesh.core import build_dual, make_trimesh, triangulate_square

SQUARE = ((-0.25, 0.25), (-0.25, 0.25))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale studies (deselect with -m 'not slow')")


@pytest.fixture(scope="session")
def coarse_dual():
    """Structured dual of the square, h = 0.1."""
    return build_dual(triangulate_square(SQUARE, 0.1))


@pytest.fixture(scope="session")
def fine_dual():
    """Structured dual of the square, h = 0.05."""
    return build_dual(triangulate_square(SQUARE, 0.05))


@pytest.fixture(scope="session")
def jittered_dual():
    """Perturbed dual with unequal faces and weights."""
    return build_dual(triangulate_square(SQUARE, 0.08, jitter=0.3, seed=3))


@pytest.fixture(scope="session")
def octahedron_primal():
    """Origin and the six unit points +-e_k, eight tetrahedra around the origin."""
    vertices = np.vstack([np.zeros(3), np.eye(3), -np.eye(3)])
    cells = []
    for sx in (1, 4):
        for sy in (2, 5):
            for sz in (3, 6):
                cells.append([0, sx, sy, sz])
    return make_trimesh(vertices, np.array(cells))


@pytest.fixture(scope="session")
def octahedron_dual(octahedron_primal):
    """Single box: the unit cube centred at the origin."""
    return build_dual(octahedron_primal)
