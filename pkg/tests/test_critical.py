import csv
import math

import numpy as np
import pytest

from brokenflow.critical import CriticalProfile, critical_profile, depth_grid, mu2, tau_b_reconstruct
from brokenflow.geodesic.oracles import boundary_cut_distances
from brokenflow.mesh import boundary_mesh
from brokenflow.relation import generate_lattice


@pytest.fixture(scope="module")
def conf_rel(conf):
    return generate_lattice(conf, boundary_mesh(conf, 128), 0.04)


def test_mu2_ball_is_radius(ball_rel):
    e = mu2(ball_rel, 0)
    assert abs(e.value - 1.0) <= 2e-2
    assert e.value <= e.mu1 + 1e-12


def test_mu2_hemisphere_is_quarter_circle(hemi_rel):
    assert abs(mu2(hemi_rel, 5).value - math.pi / 2) <= 2e-2


def test_mu2_conformal_between_cut_and_exit(conf, conf_rel):
    e = mu2(conf_rel, 3)
    tb = boundary_cut_distances(conf, conf_rel.mesh_points[[3]], coarse=0.3, tol=1e-3)[0]
    assert tb - 2e-2 <= e.value <= e.mu1 + 1e-12


def test_depth_grid_increasing_and_positive(ball_rel):
    g = depth_grid(ball_rel, 0)
    assert g[0] > 0 and np.all(np.diff(g) > 0)


@pytest.mark.parametrize("fixture,expected", [("ball_rel", 1.0), ("hemi_rel", math.pi / 2)])
def test_tau_b_reconstruct_known_values(request, fixture, expected):
    rel = request.getfixturevalue(fixture)
    est = tau_b_reconstruct(rel, 7)
    assert abs(est.value - expected) <= 2e-2
    assert est.value <= est.mu2 + 1e-12


def test_tau_b_reconstruct_conformal(conf, conf_rel):
    est = tau_b_reconstruct(conf_rel, 7)
    ref = boundary_cut_distances(conf, conf_rel.mesh_points[[7]], coarse=0.3, tol=1e-3)[0]
    assert abs(est.value - ref) <= 3e-2


def test_profile_chain_and_csv(ball_rel, tmp_path):
    prof = critical_profile(ball_rel, [0, 10, 20], tau_b="reconstruct")
    assert prof.chain_holds().all()
    assert np.all(prof.tau_b <= prof.mu2 + 2e-2)
    path = tmp_path / "p.csv"
    prof.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["z0", "z1", "z2", "mu1", "mu2", "tau_b", "tau_f", "tau_c"]
    assert len(rows) == 4


def test_chain_detects_violation():
    pts = np.zeros((2, 3))
    prof = CriticalProfile(pts, mu1=np.array([1.0, 1.0]), mu2=np.array([1.0, 1.0]),
                           tau_b=np.array([0.9, 1.5]), tau_f=np.array([np.inf, np.inf]),
                           tau_c=np.array([np.inf, np.inf]))
    assert prof.chain_holds().tolist() == [True, False]


def test_chain_requires_focal_before_conjugate():
    pts = np.zeros((1, 3))
    prof = CriticalProfile(pts, np.array([2.0]), np.array([1.0]), np.array([np.nan]),
                           np.array([1.5]), np.array([1.2]))
    assert not prof.chain_holds()[0]
