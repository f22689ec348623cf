"""Command line entry point: one subcommand per pipeline stage group."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .errors import BrokenFlowError

COMMAND_STAGES = {
    "gen-relation": ["relation"],
    "critical": ["critical"],
    "recon-boundary-metric": ["boundary_metric", "chord"],
    "recon-rx": ["focusing"],
    "assemble": ["assemble"],
    "transport-sim": ["transport"],
    "report": None,                 # configured stage list, then figures
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI pipeline configuration")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--workers", type=int, help="override [run] workers")
    common.add_argument("--out", help="output directory (override [run] out)")
    common.add_argument("-q", "--quiet", action="store_true")
    p = argparse.ArgumentParser(prog="brokenflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMAND_STAGES:
        sub.add_parser(name, parents=[common])
    cmp_ = sub.add_parser("compare", parents=[common],
                          help="nearest-event match rate between two relation files")
    cmp_.add_argument("first")
    cmp_.add_argument("second")
    cmp_.add_argument("--manifold", required=True, help="catalog manifold both files were written for")
    cmp_.add_argument("--min-rate", type=float, default=0.99)
    return p


def _config(args) -> cfgmod.PipelineConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.defaults()
    for key in ("seed", "workers", "out"):
        v = getattr(args, key)
        if v is not None:
            cfg = cfg.override("run", key, v)
    return cfg


def _compare(args, cfg) -> int:
    import json
    from . import manifold
    from .eventio import load_relation
    from .transport import match_rate
    spec = manifold.catalog(args.manifold)
    a, b = load_relation(args.first, spec), load_relation(args.second, spec)
    ab, ba = match_rate(a, b), match_rate(b, a)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {"first": args.first, "second": args.second, "first_in_second": ab, "second_in_first": ba,
              "min_rate": args.min_rate, "passed": ab >= args.min_rate}
    (out / "compare.json").write_text(json.dumps(result, indent=2))
    print(f"match rate {ab:.4f} (reverse {ba:.4f}) {'PASS' if result['passed'] else 'FAIL'}")
    return 0 if result["passed"] else 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if args.command == "compare":
            return _compare(args, cfg)
        from .pipeline import run_pipeline
        report = run_pipeline(cfg, COMMAND_STAGES[args.command])
        if args.command == "report":
            from .plotting import render_report
            render_report(cfg.out)
    except BrokenFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for s in report.stages:
        for c in s.checks:
            print(f"[{c.criterion}] {s.stage:<16} {c.manifold:<16} {c.name:<28} {c.value:<12.4g} "
                  f"{'PASS' if c.passed else 'FAIL'}")
        if s.status != "ok":
            print(f"    {s.stage}: {s.status} {s.error}")
    print("all checks passed" if report.passed else "some checks FAILED")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
