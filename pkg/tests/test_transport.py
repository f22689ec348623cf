import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from brokenflow.errors import DataError, DomainError
from brokenflow.geodesic.flow import GeodesicPath
from brokenflow.relation import Tolerances
from brokenflow.transport import (Attenuation, Kernel, TransportScene, attenuation_factor,
                                  ballistic_arrival, exponent_fit, match_rate, once_scattered,
                                  radial_sources, read_arrivals_csv, relation_from_arrivals,
                                  write_arrivals_csv)

K = np.array([1.0, 2.0, 4.0, 8.0])


def _line(a, b, samples=5):
    s = np.linspace(0, 1, samples)
    a, b = np.asarray(a, float), np.asarray(b, float)
    L = np.linalg.norm(b - a)
    X = a + s[:, None] * (b - a)
    return GeodesicPath(s * L, X, np.repeat(((b - a) / L)[None], samples, 0), "exited")


def _scene(spec, sigma=Attenuation(), kernel=None):
    return TransportScene(spec, [[-1.15, 0, 0]], [[1, 0, 0]], 1.3, sigma, kernel)


def test_no_attenuation_at_zero_k(ball):
    a = attenuation_factor(_scene(ball), _line([0, 0, 0], [1.5, 0, 0]), [0.0])
    assert a[0] == pytest.approx(1.0)


def test_constant_k_decay(ball):
    a = attenuation_factor(_scene(ball), _line([0, 0, 0], [1.5, 0, 0]), [2.0])
    assert a[0] == pytest.approx(math.exp(-3.0), rel=1e-12)


def test_quadratic_sigma_integral(ball):
    scene = _scene(ball, Attenuation(0.0, 1.0))
    a = attenuation_factor(scene, _line([0, 0, 0], [1, 0, 0]), K)
    assert np.allclose(a, np.exp(-K) * math.exp(-1 / 3), rtol=1e-12)


def test_negative_k_rejected(ball):
    with pytest.raises(DomainError):
        attenuation_factor(_scene(ball), _line([0, 0, 0], [1, 0, 0]), [-1.0])


def test_exponent_fit_examples():
    assert exponent_fit(K, np.exp(-2 * K)) == pytest.approx(2.0, abs=1e-12)
    assert exponent_fit(K, 7 * np.exp(-3.5 * K)) == pytest.approx(3.5, abs=1e-12)


@pytest.mark.parametrize("k,a", [([1, 2], [0.5, 0.2]), ([1, 2, 3], [0.5, 0.0, 0.1]), ([1, 2, 3], [1, 2])])
def test_exponent_fit_bad_input(k, a):
    with pytest.raises(DataError):
        exponent_fit(k, a)


@given(st.floats(0.1, 10), st.floats(0.01, 100))
def test_exponent_fit_recovers_any_time(t, c):
    assert exponent_fit(K, c * np.exp(-t * K)) == pytest.approx(t, abs=1e-8)


def test_ballistic_central_ray(ball):
    e = ballistic_arrival(_scene(ball, Attenuation(0.1, 0.0)))
    assert e.t == pytest.approx(2.45, abs=1e-9)
    assert np.allclose(e.y, [1.3, 0, 0], atol=1e-9)
    assert exponent_fit(K, e.amplitude) == pytest.approx(2.45, abs=1e-8)


def test_scene_validation(ball):
    with pytest.raises(DomainError):
        TransportScene(ball, [[0.5, 0, 0]], [[1, 0, 0]], 1.3)          # source inside M
    with pytest.raises(DomainError):
        TransportScene(ball, [[1.1, 0, 0]], [[1, 0, 0]], 0.9)          # sphere inside M
    with pytest.raises(DomainError):
        Kernel(ball, scale=-1.0)


def test_radial_sources_aim_inwards(ball):
    P, D = radial_sources(ball, 6, 1.15)
    assert np.allclose(np.linalg.norm(P, axis=1), 1.15)
    assert np.allclose(D, -P / 1.15)


@pytest.fixture(scope="module")
def scattered(ball):
    scene = _scene(ball, kernel=Kernel(ball, 1.0, 0.5))
    return scene, once_scattered(scene, 0.5, 8)


def test_kernel_scale_scales_amplitudes(ball, scattered):
    scene, ev = scattered
    ev5 = once_scattered(_scene(ball, kernel=Kernel(ball, 5.0, 0.5)), 0.5, 8)
    assert len(ev5) == len(ev) > 0
    ratio = np.array([b.amplitude / a.amplitude for a, b in zip(ev, ev5)])
    assert np.allclose(ratio, 5.0, rtol=1e-12)


def test_scattered_times_fit(scattered):
    scene, ev = scattered
    err = max(abs(exponent_fit(scene.k_grid, e.amplitude) - e.t) for e in ev)
    assert err <= 1e-8


def test_relation_from_scattered_arrivals(ball, scattered):
    scene, ev = scattered
    tol = Tolerances(0.05, 0.05, 0.05)
    rel = relation_from_arrivals(scene, ev, tol)
    assert rel.n_explicit + rel.params["rejected"] == len(ev)
    # the ball is flat: interior time is the broken Euclidean length through the scatter point
    assert np.all(rel.ev_t > 0)
    assert match_rate(rel, rel) == 1.0


def test_empty_arrivals_give_empty_relation(ball):
    scene = _scene(ball)
    rel = relation_from_arrivals(scene, [], Tolerances(0.05, 0.05, 0.05))
    assert rel.n_explicit == 0
    assert match_rate(rel, rel) == 1.0


def test_arrivals_csv_round_trip_and_digest(tmp_path, ball, scattered):
    scene, ev = scattered
    p1 = write_arrivals_csv(scene, ev, tmp_path / "a.csv")
    p2 = write_arrivals_csv(scene, ev, tmp_path / "b.csv")
    assert hashlib.sha256(p1.read_bytes()).digest() == hashlib.sha256(p2.read_bytes()).digest()
    back = read_arrivals_csv(scene, p1)
    assert len(back) == len(ev)
    assert all(np.array_equal(a.amplitude, b.amplitude) and a.t == b.t for a, b in zip(ev, back))


def test_arrivals_csv_scene_mismatch(tmp_path, ball, scattered):
    scene, ev = scattered
    path = write_arrivals_csv(scene, ev, tmp_path / "a.csv")
    with pytest.raises(DataError):
        read_arrivals_csv(_scene(ball, Attenuation(0.3, 0.0)), path)
