import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from brokenflow.critical import depth_grid
from brokenflow.errors import DomainError
from brokenflow.mesh import boundary_mesh
from brokenflow.focusing import build_forward, focus_point, search, time_gradient, verify


@pytest.fixture(scope="module")
def ball_family(ball, ball_mesh):
    # deep enough that the coarse test lattice resolves the patch directions
    return build_forward(ball, ball_mesh, 0, 0.7)


def test_forward_family_meets_at_normal_point(ball, ball_family):
    c, spread = focus_point(ball, ball_family)
    z0 = ball_family.z0
    assert spread <= 1e-5
    assert np.allclose(c, z0 * 0.3, atol=1e-5)     # depth 0.7 on the inward radius
    assert ball_family.times[0] == pytest.approx(0.7, abs=1e-9)


def test_forward_family_times_are_euclidean_distances(ball_family):
    x0 = np.asarray(ball_family.diagnostics["x0"])
    d = np.linalg.norm(ball_family.points - x0, axis=1)
    assert np.allclose(ball_family.times, d, atol=1e-6)


def test_forward_beyond_exit_rejected(ball, ball_mesh):
    with pytest.raises(DomainError):
        build_forward(ball, ball_mesh, 0, 2.5)


def test_forward_family_verifies(ball_rel, ball_family):
    assert verify(ball_rel, ball_family).accepted


def test_shifted_and_tilted_controls_rejected(ball, ball_rel, ball_family):
    assert not verify(ball_rel, ball_family.shifted(0.1)).accepted
    assert not verify(ball_rel, ball_family.tilted(ball, 0.2)).accepted


def test_time_gradient_vanishes_at_anchor(ball, ball_family):
    assert time_gradient(ball, ball_family) < 1e-2


def test_hemisphere_forward_family(hemi, hemi_rel):
    F = build_forward(hemi, boundary_mesh(hemi, 128), 3, 0.8)
    assert focus_point(hemi, F)[1] <= 1e-5
    assert verify(hemi_rel, F).accepted


def test_search_finds_family_on_grid(ball, ball_rel):
    g = depth_grid(ball_rel, 0)
    t0 = float(g[np.argmin(np.abs(g - 0.5))])
    F = search(ball_rel, 0, t0)
    assert F is not None and len(F) >= 3
    _, spread = focus_point(ball, F)
    assert spread <= 3 * ball_rel.tol.space


def test_family_csv(tmp_path, ball_family):
    path = tmp_path / "f.csv"
    ball_family.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0][-2:] == ["t", "t0"]
    assert len(rows) == len(ball_family) + 1


@given(st.floats(0.1, 0.9))
def test_forward_spread_small_for_any_depth(ball, ball_mesh, t0):
    F = build_forward(ball, ball_mesh, 5, t0)
    assert focus_point(ball, F)[1] <= 1e-5
