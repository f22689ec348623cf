"""Acceptance criteria 1-9 on the default configuration.

One session run of the full pipeline feeds every test; each test prints a
single ``criterion N: PASS|FAIL`` line with the checks behind it.
"""
import pytest

from brokenflow import config as cfgmod
from brokenflow.pipeline import run_pipeline

pytestmark = pytest.mark.slow


@pytest.fixture(scope="session")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    cfg = cfgmod.defaults().override("run", "out", str(out))
    return cfg, run_pipeline(cfg)


def _verdict(capsys, report, criterion, extra=()):
    checks = [c for c in report.checks if c.criterion == criterion] + list(extra)
    errors = [f"{s.stage}: {s.status} {s.error}" for s in report.stages
              if s.status != "ok" and criterion in _STAGE_CRITERIA[s.stage]]
    ok = bool(checks) and all(c.passed for c in checks) and not errors
    parts = [f"{c.manifold or '-'}:{c.name}={c.value:.4g}[limit {c.threshold:.4g}"
             f"{'; ' + c.detail if c.detail else ''}]{'' if c.passed else ' FAILED'}" for c in checks]
    with capsys.disabled():
        print(f"\ncriterion {criterion}: {'PASS' if ok else 'FAIL'} " + " ".join(parts + errors))
    return ok, checks, errors


_STAGE_CRITERIA = {"relation": (8,), "critical": (1, 2), "boundary_metric": (3,), "chord": (4,),
                   "focusing": (5,), "assemble": (6,), "transport": (7,), "negative_control": (9,)}


@pytest.mark.parametrize("criterion", [1, 2, 3, 4, 5, 6, 7, 9])
def test_criterion(run, capsys, criterion):
    _, report = run
    ok, checks, errors = _verdict(capsys, report, criterion)
    assert ok, [c for c in checks if not c.passed] or errors


def test_criterion_8_invariants_and_determinism(run, capsys, tmp_path):
    from brokenflow.pipeline import Check
    cfg, report = run
    first = next(s for s in report.stages if s.stage == "relation")
    again = run_pipeline(cfg.override("run", "out", str(tmp_path)), ["relation"]).stages[0]
    extra = []
    for name in cfg.get("run", "manifolds"):
        key = f"{name}.digest"
        same = first.counters.get(key) is not None and first.counters.get(key) == again.counters.get(key)
        extra.append(Check(8, "rerun_digest_identical", float(same), 1.0, same, name))
    values_same = [(c.name, c.value) for c in first.checks] == [(c.name, c.value) for c in again.checks]
    extra.append(Check(8, "rerun_checks_identical", float(values_same), 1.0, values_same))
    ok, checks, errors = _verdict(capsys, report, 8, extra)
    assert ok, [c for c in checks if not c.passed] or errors
