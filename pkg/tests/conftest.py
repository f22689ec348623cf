import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from brokenflow import manifold
from brokenflow.mesh import boundary_mesh
from brokenflow.relation import generate_lattice

warnings.filterwarnings("ignore", message=".*TBB.*")

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def ball():
    return manifold.catalog("euclidean_ball")


@pytest.fixture(scope="session")
def hemi():
    return manifold.catalog("hemisphere_s3")


@pytest.fixture(scope="session")
def conf():
    return manifold.catalog("conformal_ball")


@pytest.fixture(scope="session")
def ball_mesh(ball):
    return boundary_mesh(ball, 128)


@pytest.fixture(scope="session")
def ball_rel(ball, ball_mesh):
    """Coarse normal-ray lattice on the unit ball."""
    return generate_lattice(ball, ball_mesh, 0.04)


@pytest.fixture(scope="session")
def hemi_rel(hemi):
    return generate_lattice(hemi, boundary_mesh(hemi, 128), 0.04)


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)
