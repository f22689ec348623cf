import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from brokenflow.errors import DataError, ResolutionError
from brokenflow.focusing import build_forward
from brokenflow.reconstruct import (BoundaryDistanceFn, DistanceTable, analytic_representation,
                                    assemble_representation, boundary_metric, bounce_relation,
                                    bounce_scales, chord_table, flagged_fraction, hausdorff_compare,
                                    rx_reconstruct)


@pytest.fixture(scope="module")
def bounce(ball, ball_mesh):
    return bounce_relation(ball, 8, include=ball_mesh.points)


@pytest.fixture(scope="module")
def bmetric(bounce, ball_mesh):
    return boundary_metric(bounce, 8, targets=np.arange(len(ball_mesh.points)))


@pytest.fixture(scope="module")
def chord(ball_rel, bmetric):
    return chord_table(ball_rel, bmetric)


@pytest.fixture(scope="module")
def rx(ball, ball_mesh, ball_rel, chord):
    return rx_reconstruct(ball_rel, chord, build_forward(ball, ball_mesh, 0, 0.7))


def _fn(values, flagged=None):
    v = np.asarray(values, float)
    return BoundaryDistanceFn(0, 0.5, v, np.zeros(len(v), bool) if flagged is None else np.asarray(flagged))


def test_bounce_scales():
    reach, depth = bounce_scales(16)
    assert reach == pytest.approx(16 ** -0.75)
    assert depth == pytest.approx(0.05 * 16 ** -1.25)


def test_boundary_metric_close_to_arc_length(ball_mesh, bmetric):
    P = ball_mesh.points
    arc = np.arccos(np.clip(P @ P.T, -1, 1))
    assert np.abs(bmetric.D - arc).max() <= 0.1
    chord = np.linalg.norm(P[:, None] - P[None], axis=-1)
    assert np.all(bmetric.D >= chord - 1e-9)       # broken paths never beat the straight segment


def test_boundary_metric_is_a_metric(bmetric):
    assert np.all(np.diag(bmetric.D) == 0)
    assert np.allclose(bmetric.D, bmetric.D.T)
    assert bmetric.triangle_violations(1e-9) == (0, 0)


def test_disconnected_bounce_graph_raises(bounce):
    # reach at N=4096 is far below the bounce mesh spacing: no edges survive
    with pytest.raises(ResolutionError):
        boundary_metric(bounce, 4096)


def test_chord_table_close_to_euclidean(ball_mesh, chord):
    P = ball_mesh.points
    assert np.abs(chord.D - np.linalg.norm(P[:, None] - P[None], axis=-1)).max() <= 5e-2
    assert chord.triangle_violations(1e-9)[1] == 0


def test_chord_table_rejects_foreign_metric(ball_rel, bmetric):
    small = DistanceTable(bmetric.D[:4, :4], bmetric.points[:4], "boundary")
    with pytest.raises(DataError):
        chord_table(ball_rel, small)


def test_rx_minimum_at_anchor_equals_depth(rx):
    assert rx.r.min() == pytest.approx(0.7, abs=3e-2)
    assert np.argmin(rx.r) == 0


def test_rx_matches_analytic(ball, ball_mesh, rx):
    ref = analytic_representation(ball, ball_mesh.points, [(0, 0.7)])[0]
    ok = ~rx.flagged
    assert np.abs(rx.r[ok] - ref.r[ok]).max() <= 6e-2


def test_rx_is_lipschitz_for_chord(rx, chord):
    assert rx.lipschitz_excess(chord) <= 1e-9


def test_rx_csv(tmp_path, ball_mesh, rx):
    path = tmp_path / "r.csv"
    rx.to_csv(path, ball_mesh.points)
    rows = list(csv.reader(open(path)))
    assert rows[1][-2:] == ["r", "flagged"]
    assert len(rows) == len(ball_mesh.points) + 2


def test_empty_depths_give_empty_representation(ball_rel, chord):
    A, skipped = assemble_representation(ball_rel, chord, [0, 1], lambda i: [], lambda i, t: None)
    assert A == [] and skipped == []
    assert flagged_fraction(A) == 0.0


def test_missing_families_are_skipped(ball_rel, chord):
    A, skipped = assemble_representation(ball_rel, chord, [0], lambda i: [0.3, 0.6], lambda i, t: None)
    assert A == [] and skipped == [(0, 0.3), (0, 0.6)]


def test_hausdorff_examples():
    A = [_fn([1, 2, 3]), _fn([0, 0, 0])]
    assert hausdorff_compare(A, A) == 0.0
    assert hausdorff_compare(A, [_fn(f.r + 0.25) for f in A]) == pytest.approx(0.25)
    assert hausdorff_compare([], []) == 0.0
    assert hausdorff_compare(A, []) == np.inf


def test_hausdorff_ignores_flagged_entries():
    f = _fn([1, 100], flagged=[False, True])
    assert hausdorff_compare([f], [_fn([1, 0])]) == 0.0


def test_hausdorff_mesh_mismatch():
    with pytest.raises(DataError):
        hausdorff_compare([_fn([1, 2])], [_fn([1, 2, 3])])


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(-1, 1))
def test_hausdorff_shift_is_constant(vals, c):
    A = [_fn(vals)]
    assert hausdorff_compare(A, [_fn(np.asarray(vals) + c)]) == pytest.approx(abs(c), abs=1e-12)
