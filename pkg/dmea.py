"""
Command-line entry point of the lifelong sequence-generation lab.

Usage:
    python dmea.py run --suite similar --order 1 --method dmea --seed 0 --out runs/
    python dmea.py standalone --suite similar --out runs/
    python dmea.py sweep --suite random --ratios 0.05 0.1 0.2 0.4 --out runs/
    python dmea.py report --in runs/ --out report/
    python dmea.py selftest

Environment:
    DMEA_THREADS  maximum number of concurrent runs (default 1)
"""

import os
import sys
import logging
import argparse
from dataclasses import replace
from typing import List, Optional

from config import LabConfig, load_config
from errors import DMEAError
from harness import (
    METHODS, RunJob, prepare_backbone, report, run_jobs, standalone_scores, write_standalone,
)
from taskgen import SUITES, make_suite

logger = logging.getLogger(__name__)

SWEEP_METHODS = ("dmea", "acm")


def _seeds(args, config: LabConfig) -> List[int]:
    return list(args.seed) if args.seed else list(config.harness.seeds)


def _with_ratio(config: LabConfig, ratio: Optional[float]) -> LabConfig:
    if ratio is None:
        return config
    return replace(config, adaptation=replace(config.adaptation, pseudo_ratio=ratio)).validate()


def cmd_run(args) -> int:
    config = _with_ratio(load_config(args.config), args.pseudo_ratio)
    tag = f"ratio{args.pseudo_ratio:g}" if args.pseudo_ratio is not None else ""
    checkpoint = prepare_backbone(config)
    jobs = [
        RunJob(args.suite, args.order, method, seed, config, args.out, checkpoint, tag)
        for method in args.method
        for seed in _seeds(args, config)
    ]
    print(f"⏳ {len(jobs)} runs on the {args.suite} suite, order {args.order}")
    for path in run_jobs(jobs, config.harness.threads):
        print(f"✓ {path}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    checkpoint = prepare_backbone(config)
    jobs = []
    for ratio in args.ratios:
        ratio_config = _with_ratio(config, ratio)
        for method in args.method:
            for seed in _seeds(args, config):
                jobs.append(RunJob(args.suite, args.order, method, seed, ratio_config,
                                   args.out, checkpoint, f"ratio{ratio:g}"))
    print(f"⏳ Pseudo-ratio sweep: {len(jobs)} runs")
    for path in run_jobs(jobs, config.harness.threads):
        print(f"✓ {path}")
    return 0


def cmd_standalone(args) -> int:
    config = load_config(args.config)
    checkpoint = prepare_backbone(config)
    suite = make_suite(args.suite, config.taskgen.seed, config.taskgen)
    for seed in _seeds(args, config):
        print(f"⏳ Standalone scores for {args.suite}, seed {seed}")
        scores = standalone_scores(suite, seed, config, checkpoint)
        path = write_standalone(scores, os.path.join(args.out, f"standalone-{args.suite}-seed{seed}"), args.suite, seed)
        print(f"✓ {path}")
    return 0


def cmd_report(args) -> int:
    artefacts = report(args.input, args.out)
    for name, path in artefacts.items():
        print(f"✓ {name}: {path}")
    return 0


def cmd_selftest(args) -> int:
    import pytest

    tests = os.path.join(os.path.dirname(os.path.abspath(__file__)), "tests")
    options = [tests, "-q"]
    options += ["--runslow"] if args.slow else ["-m", "not slow"]
    return int(pytest.main(options))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Lifelong sequence generation with dynamic module expansion")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, methods=True):
        p.add_argument("--suite", choices=sorted(SUITES), default="similar")
        p.add_argument("--order", type=int, default=1, help="task order number (1 = natural order)")
        p.add_argument("--seed", type=int, nargs="*", help="run seeds (default: harness.seeds)")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="runs", help="output directory")
        if methods:
            p.add_argument("--method", nargs="+", choices=sorted(METHODS), default=["dmea"])

    p = sub.add_parser("run", help="run lifelong sequences")
    common(p)
    p.add_argument("--pseudo-ratio", type=float, help="override adaptation.pseudo_ratio")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="pseudo-data ratio sweep")
    common(p)
    p.set_defaults(method=list(SWEEP_METHODS))
    p.add_argument("--ratios", type=float, nargs="+", default=[0.05, 0.1, 0.2, 0.4])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("standalone", help="train every task in isolation")
    common(p, methods=False)
    p.set_defaults(func=cmd_standalone)

    p = sub.add_parser("report", help="summarise finished runs")
    p.add_argument("--in", dest="input", required=True, help="directory holding run directories")
    p.add_argument("--out", default="report", help="report directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the test suites")
    p.add_argument("--slow", action="store_true", help="include acceptance-scale tests")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    args = build_parser().parse_args(argv)

    print("=" * 70)
    print(f"📊 DMEA LAB: {args.command.upper()}")
    print("=" * 70)

    try:
        status = args.func(args)
    except DMEAError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"\n❌ {e}")
        return 1

    print("\n" + "=" * 70)
    print("✅ DONE" if status == 0 else f"❌ EXIT STATUS {status}")
    print("=" * 70)
    return status


if __name__ == "__main__":
    sys.exit(main())
