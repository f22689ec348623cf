import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from brokenflow import config as cfgmod
from brokenflow.cli import main
from brokenflow.errors import ConfigError, DataError
from brokenflow.eventio import (export_events_csv, file_digest, import_events_csv, load_relation,
                                save_relation)
from brokenflow.mesh import boundary_mesh
from brokenflow.pipeline import convergence_table, run_pipeline
from brokenflow.plotting import render_report
from brokenflow.relation import generate_lattice

SMALL = """
[run]
manifolds = euclidean_ball
stages = relation
[relation]
mesh_size = 32
depth_spacing = 0.1
reversal_samples = 50
replay_samples = 20
"""


@pytest.fixture(scope="module")
def small_rel(ball):
    return generate_lattice(ball, boundary_mesh(ball, 24), 0.2)


# config

def test_defaults_cover_all_stages():
    cfg = cfgmod.defaults()
    assert cfg.get("run", "stages") == list(cfgmod.STAGES)
    assert cfg.get("critical", "points") == 200


def test_parse_lists_and_overrides():
    cfg = cfgmod.parse("[boundary_metric]\nlevels = 8, 16\n[run]\nseed = 3\n")
    assert cfg.get("boundary_metric", "levels") == [8, 16]
    assert cfg.seed == 3
    assert cfg.override("run", "seed", 5).seed == 5
    assert cfg.seed == 3


@pytest.mark.parametrize("text", ["[relation]\nmesh_sise = 3\n", "[nonsense]\na = 1\n",
                                  "[run]\nstages = relation, teleport\n", "[relation]\nmesh_size = many\n"])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        cfgmod.parse(text)


def test_config_text_round_trip():
    cfg = cfgmod.parse(SMALL)
    assert cfgmod.parse(cfg.to_text()).values == cfg.values


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        cfgmod.load(tmp_path / "absent.ini")


# relation files

def test_binary_round_trip(tmp_path, ball, small_rel):
    path = save_relation(small_rel, tmp_path / "r.npz")
    back = load_relation(path, ball)
    assert back.n_events == small_rel.n_events
    assert np.array_equal(back.leg_len, small_rel.leg_len)


def test_binary_files_are_byte_identical(tmp_path, small_rel):
    a = save_relation(small_rel, tmp_path / "a.npz")
    b = save_relation(small_rel, tmp_path / "b.npz")
    assert file_digest(a) == file_digest(b)


def test_csv_and_binary_answer_queries_alike(tmp_path, ball, small_rel):
    csv_rel = import_events_csv(export_events_csv(small_rel, tmp_path / "r.csv"), ball)
    bin_rel = load_relation(save_relation(small_rel, tmp_path / "r.npz"), ball)
    x, xi, y, zeta, t = small_rel.explicit_arrays()
    rng = np.random.default_rng(0)
    pick = rng.choice(len(t), 40, replace=False)
    for q, dt in zip(pick, np.tile([0.0, 0.5], 20)):
        a = csv_rel.holds((x[q], xi[q]), (y[q], zeta[q]), t[q] + dt)
        b = bin_rel.holds((x[q], xi[q]), (y[q], zeta[q]), t[q] + dt)
        assert a == b == (dt == 0.0)


def test_files_for_another_manifold_rejected(tmp_path, hemi, small_rel):
    with pytest.raises(DataError):
        load_relation(save_relation(small_rel, tmp_path / "r.npz"), hemi)
    with pytest.raises(DataError):
        import_events_csv(export_events_csv(small_rel, tmp_path / "r.csv"), hemi)


# convergence tables

def test_convergence_slope_quarter(tmp_path):
    N = np.array([8, 16, 32, 64])
    slope = convergence_table(tmp_path / "c.csv", "d", N, 0.3 * N ** -0.25)
    assert slope == pytest.approx(-0.25, abs=1e-12)
    assert (tmp_path / "c.csv").read_text().startswith("# series=d slope=")


def test_convergence_slope_constant(tmp_path):
    assert convergence_table(tmp_path / "c.csv", "d", [8, 16, 32], [0.1] * 3) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("params,errors", [([8], [0.1]), ([8, 16], [0.1, 0.0]), ([8, 16], [0.1])])
def test_convergence_bad_input(tmp_path, params, errors):
    with pytest.raises(DataError):
        convergence_table(tmp_path / "c.csv", "d", params, errors)


@given(st.floats(-2, 0), st.floats(0.01, 10))
def test_convergence_recovers_power(tmp_path_factory, p, c):
    N = np.array([4.0, 8, 16, 32])
    path = tmp_path_factory.mktemp("conv") / "c.csv"
    assert convergence_table(path, "d", N, c * N ** p) == pytest.approx(p, abs=1e-9)


# pipeline and command line

def test_small_pipeline_passes_and_is_deterministic(tmp_path):
    digests = []
    for k in range(2):
        cfg = cfgmod.parse(SMALL).override("run", "out", str(tmp_path / f"o{k}"))
        report = run_pipeline(cfg)
        assert report.passed
        digests.append(file_digest(tmp_path / f"o{k}" / "relation_euclidean_ball.npz"))
        assert json.loads((tmp_path / f"o{k}" / "report.json").read_text())["passed"]
    assert digests[0] == digests[1]


def test_cli_exit_codes(tmp_path):
    ini = tmp_path / "small.ini"
    ini.write_text(SMALL)
    assert main(["gen-relation", "--config", str(ini), "--out", str(tmp_path / "a"), "-q"]) == 0
    ini.write_text(SMALL.replace("mesh_size = 32", "mesh_size = 0"))
    assert main(["gen-relation", "--config", str(ini), "--out", str(tmp_path / "b"), "-q"]) == 1
    ini.write_text("[relation]\nmesh_sise = 3\n")
    assert main(["gen-relation", "--config", str(ini), "--out", str(tmp_path / "c"), "-q"]) == 2


def test_cli_compare(tmp_path):
    ini = tmp_path / "small.ini"
    ini.write_text(SMALL)
    main(["gen-relation", "--config", str(ini), "--out", str(tmp_path), "-q"])
    rel = str(tmp_path / "relation_euclidean_ball.npz")
    code = main(["compare", rel, rel, "--manifold", "euclidean_ball", "--out", str(tmp_path), "-q"])
    assert code == 0
    assert json.loads((tmp_path / "compare.json").read_text())["first_in_second"] == 1.0


def test_report_renders_figures(tmp_path):
    cfg = cfgmod.parse(SMALL).override("run", "out", str(tmp_path))
    run_pipeline(cfg)
    convergence_table(tmp_path / "boundary_metric_x.csv", "d", [8, 16, 32], [0.3, 0.25, 0.2])
    made = render_report(tmp_path)
    assert {p.name for p in made} == {"boundary_metric_x.png", "checks.png"}
    assert all(p.stat().st_size > 0 for p in made)
