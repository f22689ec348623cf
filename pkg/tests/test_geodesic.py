import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from brokenflow import manifold
from brokenflow.errors import CapabilityError, ChartEscapeError
from brokenflow.geodesic.flow import (UnitTangent, connect, first_exit, integrate, shoot,
                                      speed_drift)
from brokenflow.geodesic.jacobi import (conjugate_distance, focal_distance, jacobi,
                                        sigma_profile)
from brokenflow.geodesic.oracles import (boundary_cut_distance, boundary_cut_distances,
                                         cut_distance, dist_to_boundary, distance_oracle)

from conftest import unit

angles = st.floats(0.0, 1.2)
directions = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(
    lambda v: np.linalg.norm(v) > 0.1).map(np.array)


def test_ball_diameter_path(ball):
    z = np.array([0.0, 0.0, 1.0])
    p = integrate(ball, UnitTangent(z, -z), 3.0)
    assert p.status == "exited"
    assert p.exit_length == pytest.approx(2.0, abs=1e-9)
    assert np.allclose(p.exit_point, -z, atol=1e-9)
    assert np.allclose(p.x[:, :2], 0.0, atol=1e-12)


def test_hemisphere_meridian(hemi):
    z = np.array([1.0, 0.0, 0.0])
    nu = hemi.normal_field(z)
    p = integrate(hemi, UnitTangent(z, nu), 2 * math.pi)
    assert p.exit_length == pytest.approx(math.pi, abs=1e-8)
    pole = np.argmin(np.abs(p.s - math.pi / 2))
    assert np.linalg.norm(p.x[pole]) < 2e-3


def test_conformal_exit_self_convergence(conf):
    z = unit([0.3, -0.2, 0.9])
    start = UnitTangent(z, conf.normal_field(z))
    L, y, zeta = first_exit(conf, start)
    Lf, yf, _ = first_exit(conf, start, step=conf.default_step / 16)
    assert abs(L - Lf) < 1e-6
    assert np.linalg.norm(y - yf) < 1e-6


@pytest.mark.parametrize("theta", [0.0, 0.4, 1.0])
def test_ball_chord_length(ball, theta):
    z = np.array([0.0, 0.0, 1.0])
    xi = np.array([math.sin(theta), 0.0, -math.cos(theta)])
    L, y, zeta = first_exit(ball, UnitTangent(z, xi))
    assert L == pytest.approx(2 * math.cos(theta), abs=1e-9)
    assert ball.inner(y, zeta.xi, ball.normal_field(y)) < 0


def test_hemisphere_normal_exit_is_pi(hemi):
    z = np.array([0.0, 1.0, 0.0])
    assert first_exit(hemi, UnitTangent(z, hemi.normal_field(z)))[0] == pytest.approx(math.pi, abs=1e-8)


def test_invalid_arguments(ball):
    start = UnitTangent(np.zeros(3), np.array([1.0, 0, 0]))
    with pytest.raises(ValueError):
        integrate(ball, start, 1.0, step=0.0)
    with pytest.raises(ChartEscapeError):
        integrate(ball, start, 5.0, stop_at_boundary=False)


def test_conjugate_distances(ball, hemi):
    start = UnitTangent(np.zeros(3), np.array([1.0, 0, 0]))
    assert conjugate_distance(ball.extension(), start, 3.0) is None
    s3 = hemi.extension()
    # the antipode of x sits at -x/|x|^2, inside the chart for |x| = 0.8
    x = np.array([0.8, 0.0, 0.0])
    c = conjugate_distance(s3, UnitTangent.make(s3, x, [0.0, 1.0, 0.2]), 4.0)
    assert c == pytest.approx(math.pi, abs=1e-4)


def test_conformal_conjugate_matches_dense_scan(conf):
    ext = conf.extension()
    # start where the antipode stays inside the chart
    start = UnitTangent.make(ext, [1.5, 0.0, 0.0], [0.0, 1.0, 0.3])
    c = conjugate_distance(ext, start, ext.chart_diameter)
    assert c == pytest.approx(ext.oracles["tau_c"](start.x, start.xi), abs=1e-4)
    s, sig = sigma_profile(ext, start, c + 0.2, step=ext.default_step / 4)
    dense = s[np.argmin(np.where(s > 0.5 * c, sig, np.inf))]
    assert c == pytest.approx(dense, abs=1e-3)


def test_focal_distances(ball, hemi, conf):
    assert focal_distance(ball, np.array([1.0, 0, 0])) == pytest.approx(1.0, abs=1e-4)
    assert focal_distance(hemi, np.array([1.0, 0, 0])) == pytest.approx(math.pi / 2, abs=1e-4)
    z = np.array([0.0, 0.0, 1.0])
    # the radial metric focuses every normal ray at the centre
    assert focal_distance(conf, z) == pytest.approx(conf.oracles["tau_f"](z), abs=1e-4)


def test_distance_oracle_examples(ball, hemi):
    x, y = unit([1, 0.2, 0]), unit([-0.3, 1, 0.4])
    assert distance_oracle(ball, x, y, n_samples=4000) == pytest.approx(np.linalg.norm(x - y), abs=1e-2)
    a, b = np.array([1.0, 0, 0]), unit([0.2, 1.0, 0.0])
    assert distance_oracle(hemi, a, b, n_samples=4000) == pytest.approx(math.acos(a @ b), abs=1e-2)


def test_distance_oracle_refinement(conf):
    x, y = unit([1, 0, 0.3]) * 0.9, unit([-0.2, 1, 0]) * 0.7
    coarse = distance_oracle(conf, x, y, n_samples=3000, refine=False)
    fine = distance_oracle(conf, x, y, n_samples=6000, refine=False)
    assert abs(coarse - fine) < 2e-2
    assert distance_oracle(conf, x, y) == pytest.approx(float(conf.radial.sphere_distance(x, y)), abs=1e-6)


def test_cut_distance_sphere_and_torus(hemi):
    s3 = hemi.extension()
    start = UnitTangent.make(s3, [0.8, 0.0, 0.0], [0.0, 1.0, 0.2])
    assert cut_distance(s3, start, 4.0) == pytest.approx(math.pi, abs=2e-2)
    box = manifold.catalog("euclidean_ball", extension="torus", period=2.0).extension()
    start = UnitTangent.make(box, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    assert cut_distance(box, start, 3.0) == pytest.approx(1.0, abs=2e-2)


def test_cut_distance_needs_extension():
    spec = manifold.catalog("euclidean_ball", extension="none")
    with pytest.raises(CapabilityError):
        cut_distance(spec, UnitTangent(np.zeros(3), np.array([1.0, 0, 0])))


def test_boundary_cut_distance_examples(ball, hemi):
    kw = dict(coarse=0.3, tol=1e-3)
    assert boundary_cut_distance(ball, np.array([0, 0, 1.0]), **kw) == pytest.approx(1.0, abs=1e-2)
    assert boundary_cut_distance(hemi, np.array([0, 1.0, 0]), **kw) == pytest.approx(math.pi / 2, abs=1e-2)


def test_conformal_boundary_cut_batch_matches_scan(conf):
    z = unit([0.2, 0.5, 0.8])
    batch = boundary_cut_distances(conf, z[None])[0]
    single = boundary_cut_distance(conf, z, coarse=0.3, tol=1e-3)
    assert batch == pytest.approx(single, abs=1e-2)
    assert batch == pytest.approx(float(conf.radial.antiderivative(1.0)), abs=1e-2)


def test_dist_to_boundary_center(ball):
    assert dist_to_boundary(ball, np.zeros(3)) == pytest.approx(1.0, abs=1e-6)


def test_two_point_connect(conf):
    x, y = np.array([0.1, 0.2, 0.0]), np.array([-0.3, 0.4, 0.2])
    xi, L, _ = connect(conf, x, y)
    assert np.allclose(shoot(conf, x, xi, L, stop_at_boundary=False).x[0], y, atol=1e-8)
    assert L == pytest.approx(float(conf.radial.sphere_distance(x, y)), abs=1e-8)


@pytest.mark.parametrize("name", ["euclidean_ball", "hemisphere_s3", "conformal_ball"])
@given(v=directions)
def test_unit_speed_property(name, v):
    spec = manifold.catalog(name)
    x = np.array([0.1, -0.2, 0.05])
    assert speed_drift(spec, x[None], v[None], 0.8) <= 1e-8


@given(v=directions, r=st.floats(0.0, 0.7))
def test_exit_reversibility(v, r):
    spec = manifold.catalog("conformal_ball")
    x = r * unit([0.3, 0.1, -0.5])
    L, y, zeta = first_exit(spec, UnitTangent.make(spec, x, v))
    L2, back, back_dir = first_exit(spec, UnitTangent(y, -zeta.xi))
    # the reversed exit ray passes through x after L and continues to the other boundary point
    p = shoot(spec, y, -zeta.xi, L, stop_at_boundary=False)
    assert np.linalg.norm(p.x[0] - x) < 1e-6
    assert np.linalg.norm(p.v[0] + spec.normalize(x, v)) < 1e-6
    assert L2 >= L - 1e-9


def test_jacobi_matches_spray_variation(conf):
    x = np.array([0.1, 0.0, 0.0])
    start = UnitTangent.make(conf, x, [0.0, 1.0, 0.2])
    s_end = 0.6
    sol = jacobi(conf, start, s_end)
    eps = 1e-5
    for c, E in enumerate(sol.dJ[0]):
        plus = shoot(conf, x, start.xi + eps * E, s_end, stop_at_boundary=False).x[0]
        minus = shoot(conf, x, start.xi - eps * E, s_end, stop_at_boundary=False).x[0]
        fd = (plus - minus) / (2 * eps)
        J = sol.J[-1, c]
        assert np.linalg.norm(fd - J) <= 1e-3 * np.linalg.norm(J)


def test_order_chain_on_catalog(ball, hemi, conf):
    for spec in (ball, hemi, conf):
        z = unit([0.4, -0.3, 0.8])
        nu = spec.normal_field(z)
        tb = boundary_cut_distances(spec, z[None])[0]
        mu1 = first_exit(spec, UnitTangent(z, nu))[0]
        tf = focal_distance(spec, z)
        ext = spec.extension()
        tc = conjugate_distance(ext, UnitTangent(z, nu), ext.chart_diameter)
        assert tb <= min(0.5 * mu1, tf) + 1e-2
        if tc is not None:
            assert tf < tc


def test_path_csv(tmp_path, ball):
    p = integrate(ball, UnitTangent(np.zeros(3), np.array([0, 1.0, 0])), 2.0)
    p.to_csv(tmp_path / "p.csv")
    data = np.loadtxt(tmp_path / "p.csv", delimiter=",", skiprows=1)
    assert data.shape == (len(p.s), 7)
