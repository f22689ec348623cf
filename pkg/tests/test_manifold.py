import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from brokenflow import manifold
from brokenflow.errors import ConfigError, DomainError
from brokenflow.manifold import (boundary_gap, christoffel_at, christoffel_fd, curvature_at,
                                 inward_normal, metric_at, sectional_curvature)

coords = st.lists(st.floats(-0.9, 0.9), min_size=3, max_size=3).map(np.array)
CATALOG = ["euclidean_ball", "hemisphere_s3", "conformal_ball"]


def _embed_metric(x, h=1e-6):
    """Pullback of the round unit-sphere metric through inverse stereographic projection."""
    def emb(p):
        r2 = p @ p
        return np.concatenate([2 * p, [1 - r2]]) / (1 + r2)
    J = np.stack([(emb(x + h * e) - emb(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    return J.T @ J


def test_flat_metric_is_identity(ball):
    assert np.allclose(metric_at(ball, [0.2, -0.1, 0.3]), np.eye(3))


def test_constant_speed_metric():
    spec = manifold.catalog("constant_speed", c=2.0)
    assert np.allclose(metric_at(spec, [0.1, 0.2, 0.0]), 0.25 * np.eye(3))


def test_hemisphere_metric_matches_embedding(hemi):
    x = np.array([0.3, -0.2, 0.4])
    assert np.allclose(metric_at(hemi, x), _embed_metric(x), atol=1e-8)


def test_out_of_chart_rejected(ball):
    with pytest.raises(DomainError):
        metric_at(ball, [5.0, 0.0, 0.0])


def test_flat_christoffel_and_curvature_vanish(ball):
    x = [0.1, 0.2, -0.3]
    assert np.abs(christoffel_at(ball, x)).max() == 0
    assert np.abs(curvature_at(ball, x)).max() < 1e-10


@pytest.mark.parametrize("name", ["conformal_ball", "hemisphere_s3"])
def test_christoffel_matches_finite_differences(name):
    spec = manifold.catalog(name)
    x = np.array([0.3, -0.1, 0.25])
    assert np.abs(christoffel_at(spec, x) - christoffel_fd(spec, x)).max() < 1e-6


def test_sphere_has_unit_sectional_curvature(hemi):
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.uniform(-0.5, 0.5, 3)
        X, Y = rng.normal(size=(2, 3))
        assert sectional_curvature(hemi, x, X, Y) == pytest.approx(1.0, abs=1e-6)


def test_curvature_antisymmetries(conf):
    R = curvature_at(conf, [0.2, 0.1, -0.3])
    assert np.abs(R + np.swapaxes(R, 2, 3)).max() < 1e-6
    bianchi = R + np.einsum("lijk->ljki", R) + np.einsum("lijk->lkij", R)
    assert np.abs(bianchi).max() < 1e-6


def test_ball_normal_points_to_center(ball):
    z = np.array([0.0, 0.6, 0.8])
    assert np.allclose(inward_normal(ball, z), -z)


def test_hemisphere_normal_points_toward_pole(hemi):
    z = np.array([1.0, 0.0, 0.0])
    nu = inward_normal(hemi, z)
    assert np.allclose(nu / np.linalg.norm(nu), [-1, 0, 0])
    assert hemi.norm(z, nu) == pytest.approx(1.0, abs=1e-12)


def test_conformal_normal_is_unit(conf):
    z = np.array([0.6, 0.0, 0.8])
    nu = inward_normal(conf, z)
    assert conf.inner(z, nu, nu) == pytest.approx(1.0, abs=1e-10)


def test_normal_off_boundary_rejected(ball):
    with pytest.raises(DomainError):
        inward_normal(ball, [0.1, 0.0, 0.0])


def test_boundary_gap_sign(ball):
    assert boundary_gap(ball, [0, 0, 0]) == pytest.approx(1.0)
    assert boundary_gap(ball, [1, 0, 0]) == pytest.approx(0.0)
    assert boundary_gap(ball, [1.1, 0, 0]) < 0


def test_catalog_rejects_unknown():
    with pytest.raises(ConfigError):
        manifold.catalog("torus_knot")
    with pytest.raises(ConfigError):
        manifold.catalog("euclidean_ball", wobble=1.0)


@pytest.mark.parametrize("name", CATALOG)
def test_spec_text_round_trip(name):
    spec = manifold.catalog(name)
    again = manifold.from_text(spec.to_text())
    assert again.spec_hash == spec.spec_hash


def test_expression_metric_matches_catalog():
    text = """[manifold]
dimension = 3
g11 = 1/(1 + 0.3*(x1**2 + x2**2 + x3**2))**2
g22 = 1/(1 + 0.3*(x1**2 + x2**2 + x3**2))**2
g33 = 1/(1 + 0.3*(x1**2 + x2**2 + x3**2))**2
rho = 1 - sqrt(x1**2 + x2**2 + x3**2)
"""
    spec = manifold.from_text(text)
    ref = manifold.catalog("conformal_ball")
    x = np.array([0.2, -0.4, 0.1])
    assert np.allclose(spec.metric(x), ref.metric(x))
    assert np.allclose(spec.christoffel(x), ref.christoffel(x), atol=1e-12)
    assert manifold.from_text(spec.to_text()).spec_hash == spec.spec_hash


def test_expression_unknown_key_rejected():
    with pytest.raises(ConfigError):
        manifold.from_text("[manifold]\ndimension=2\ng11=1\ng22=1\nrho=1-x1**2\ncolour=red\n")


@pytest.mark.parametrize("name", CATALOG)
@given(x=coords)
def test_metric_spd(name, x):
    spec = manifold.catalog(name)
    assert np.linalg.eigvalsh(spec.metric(x)).min() > 0


@given(x=coords)
def test_christoffel_symmetric_lower(x):
    G = manifold.catalog("conformal_ball").christoffel(x)
    assert np.allclose(G, np.swapaxes(G, 1, 2))


def test_christoffel_fd_error_is_second_order(conf):
    x = np.array([0.3, 0.2, -0.1])
    exact = conf.christoffel(x)
    e1 = np.abs(christoffel_fd(conf, x, 1e-2) - exact).max()
    e2 = np.abs(christoffel_fd(conf, x, 5e-3) - exact).max()
    assert e1 / e2 == pytest.approx(4.0, rel=0.1)


@pytest.mark.parametrize("name", CATALOG)
def test_normal_enters_interior(name):
    from brokenflow.mesh import boundary_mesh
    spec = manifold.catalog(name)
    m = boundary_mesh(spec, 64)
    step = spec.gap(m.points + 1e-4 * m.normals)
    assert np.all(step > 0)


def test_oracles_present(hemi):
    assert hemi.oracles["tau_b"](np.array([1.0, 0, 0])) == pytest.approx(math.pi / 2)
    assert hemi.oracles["tau_f"](np.array([1.0, 0, 0])) == pytest.approx(math.pi / 2)
