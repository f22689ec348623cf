import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from brokenflow import manifold
from brokenflow.errors import CoverageError
from brokenflow.geodesic.flow import UnitTangent, first_exit
from brokenflow.mesh import boundary_mesh
from brokenflow.relation import (BrokenRelation, generate, generate_lattice, mu1_from_relation,
                                 replay_errors, reversal_failures, sample_events)


def _entry(spec, z):
    z = np.asarray(z, float)
    return z[None], spec.normal_field(z)[None]


def test_ball_center_scatter_gives_two_radii(ball):
    rel = generate(ball, _entry(ball, [0, 0, 1.0]), 0.5, 20)
    at_center = np.abs(rel.ev_s1 - 1.0) < 1e-12
    assert at_center.sum() >= 20
    assert np.allclose(rel.ev_t[at_center], 2.0, atol=1e-9)


def test_reversal_direction_gives_self_event(ball):
    z = np.array([0, 0, 1.0])
    rel = generate(ball, _entry(ball, z), 0.3, 0, include_reversal=True)
    assert len(rel.ev_t) > 0
    assert np.allclose(rel.ev_y, z, atol=1e-9)
    assert np.allclose(rel.ev_t, 2 * rel.ev_s1, atol=1e-9)


def test_hemisphere_pole_scatter_time(hemi):
    rel = generate(hemi, _entry(hemi, [1.0, 0, 0]), math.pi / 4, 12)
    pole = np.abs(rel.ev_s1 - math.pi / 2) < 1e-9
    assert pole.any()
    assert np.allclose(rel.ev_t[pole], math.pi, atol=1e-4)


def test_holds_examples(ball):
    rel = generate(ball, _entry(ball, [0, 0, 1.0]), 0.25, 30)
    k = 7
    e = rel.explicit_event(k)
    assert rel.holds((e.x, e.xi), (e.y, e.zeta), e.t)
    assert not rel.holds((e.x, e.xi), (e.y, e.zeta), e.t + 3 * rel.tol.time)


def test_lattice_antipode_query(ball, ball_rel):
    z = np.array([0, 0, 1.0])
    i = ball_rel.mesh_tree.query(z)[1]
    z = ball_rel.mesh_points[i]
    assert ball_rel.holds((z, -z), (-z, -z), 2.0)


def test_mu1_examples(ball_rel, hemi_rel, conf):
    for rel, truth in ((ball_rel, 2.0), (hemi_rel, math.pi)):
        z = rel.mesh_points[3]
        spacing = rel.params["depth_spacing"]
        assert mu1_from_relation(rel, z, rel.spec.normal_field(z)) == pytest.approx(truth, abs=spacing + 1e-9)
    rel = generate_lattice(conf, boundary_mesh(conf, 64), 0.04)
    z = rel.mesh_points[5]
    nu = conf.normal_field(z)
    assert mu1_from_relation(rel, z, nu) == pytest.approx(first_exit(conf, UnitTangent(z, nu))[0],
                                                          abs=2 * 0.04)


def test_mu1_without_events(ball_rel):
    with pytest.raises(CoverageError):
        mu1_from_relation(ball_rel, np.array([0, 0, 1.0]), np.array([1.0, 0, 0]))


def test_near_events_limits(ball):
    rel = generate_lattice(ball, boundary_mesh(ball, 24), 0.2)
    z = rel.mesh_points[0]
    assert len(rel.near_events(z, 0.0)) == 0
    wide = rel.near_events(z, 10.0)
    assert len(wide) > 0
    assert np.all(np.linalg.norm(wide.entry - z, axis=1) > 0)


def test_near_events_focus_through_pole(hemi_rel):
    z = hemi_rel.mesh_points[0]
    ev = hemi_rel.near_events(z, 2 * hemi_rel.tol.space)
    assert len(ev) > 0
    assert np.min(np.abs(ev.t - math.pi)) < 2 * hemi_rel.tol.time


def test_event_invariants(ball_rel):
    spec = ball_rel.spec
    x, xi, y, zeta, t, _, _ = sample_events(ball_rel, 500, np.random.default_rng(0))
    assert np.all(spec.inner(x, xi, spec.normal_field(x)) > 0)
    assert np.all(spec.inner(y, zeta, spec.normal_field(y)) < 0)
    assert np.all(t > 0)


def test_tangential_entries_dropped(ball):
    z = np.array([0, 0, 1.0])
    rel = generate(ball, (z[None], np.array([[1.0, 0, 1e-5]])), 0.3, 4)
    assert rel.n_events == 0
    assert rel.params["dropped_tangential"] == 1


@given(seed=st.integers(0, 2 ** 31 - 1))
def test_time_reversal_property(ball_rel, seed):
    assert reversal_failures(ball_rel, 200, np.random.default_rng(seed)) == 0


@pytest.fixture(scope="module")
def conf_rays():
    spec = manifold.catalog("conformal_ball")
    m = boundary_mesh(spec, 32)
    return generate(spec, (m.points, m.normals), 0.3, 12)


@given(seed=st.integers(0, 2 ** 31 - 1))
def test_reversed_events_replay(conf_rays, seed):
    """Reversed broken geodesics are broken geodesics: their legs replay exactly."""
    rel = conf_rays
    rev = {"x": rel.ev_y, "xi": -rel.ev_zeta, "y": rel.ev_x, "zeta": -rel.ev_xi, "t": rel.ev_t,
           "scatter": rel.ev_scatter, "s1": rel.ev_t - rel.ev_s1}
    back = BrokenRelation(rel.spec, rel.tol, params=rel.params, events=rev)
    assert replay_errors(back, 40, np.random.default_rng(seed)).max() <= 1e-6


def test_replay_fidelity(hemi):
    m = boundary_mesh(hemi, 16)
    rel = generate(hemi, (m.points, m.normals), 0.2, 16)
    err = replay_errors(rel, 1000, np.random.default_rng(3))
    assert err.max() <= 1e-6


def test_replay_fidelity_lattice(ball_rel):
    assert replay_errors(ball_rel, 300, np.random.default_rng(4)).max() <= 1e-6


def test_coverage_improves_with_refinement(ball):
    """Distance from true triples to the nearest stored event shrinks with the spacings."""
    rng = np.random.default_rng(5)
    m = boundary_mesh(ball, 64)
    truth_x = m.points[:8]
    s1 = rng.uniform(0.2, 1.5, 8)
    gaps = []
    for spacing, dirs in ((0.2, 20), (0.1, 80)):
        rel = generate(ball, (truth_x, m.normals[:8]), spacing, dirs)
        worst = 0.0
        for k in range(8):
            p = truth_x[k] + s1[k] * m.normals[k]
            eta = rng.normal(size=3)
            eta /= np.linalg.norm(eta)
            L, y, _ = first_exit(ball, UnitTangent(p, eta))
            sel = np.linalg.norm(rel.ev_x - truth_x[k], axis=1) < 1e-12
            d = np.minimum.reduce([np.linalg.norm(rel.ev_y[sel] - y, axis=1),
                                   ]) + np.abs(rel.ev_t[sel] - (s1[k] + L))
            worst = max(worst, float(d.min()))
        gaps.append(worst)
    assert gaps[1] < gaps[0]
