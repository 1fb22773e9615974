"""Command line entry point: ``stitchkit <subcommand> [--config FILE] [--seed N] [--out-dir DIR]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from .config import ConfigError
from .datamodel import DatasetError
from .pipeline import (STAGES, ComparisonError, Runner, StageError, compare_runs, lemma_check_runs, load_config,
                       write_csv)

log = logging.getLogger("stitchkit")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file (defaults when omitted)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    p.add_argument("--out-dir", default="run", help="directory for stage artifacts")
    p.add_argument("--variant", default=None, help="dfdt | no_filter | target_only | mmd_only | ot_only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stitchkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        _common(sub.add_parser(stage, help=f"run the {stage} stage only"))
    _common(sub.add_parser("pipeline", help="run every stage, resuming from the first missing output"))
    cmp_ = sub.add_parser("compare", help="side-by-side summary of finished runs")
    cmp_.add_argument("runs", nargs="+", help="run directories or manifest.json files")
    cmp_.add_argument("--out", default=None, help="write the table to this CSV file")
    lem = sub.add_parser("lemma-check", help="fusion deviation bound on random chain pools")
    lem.add_argument("--pairs", type=int, default=50)
    lem.add_argument("--trials", type=int, default=100)
    lem.add_argument("--seed", type=int, default=0)
    lem.add_argument("--threads", type=int, default=1)
    lem.add_argument("--out-dir", default=None)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("STITCHKIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, getattr(args, "threads", 1)))
    try:
        if args.command == "compare":
            text = compare_runs(args.runs, args.out)
            sys.stdout.write(text)
            return 0
        if args.command == "lemma-check":
            reports = lemma_check_runs(args.pairs, args.trials, args.seed)
            rows = [(i, r.beta, r.delta_w, r.max_slack, r.violations) for i, r in enumerate(reports)]
            if args.out_dir:
                Path(args.out_dir).mkdir(parents=True, exist_ok=True)
                write_csv(Path(args.out_dir) / "lemma_check.csv", ["pair", "beta", "delta_w", "max_slack", "violations"], rows)
            total = sum(r.violations for r in reports)
            print(f"pairs={len(reports)} trials={args.trials} violations={total} "
                  f"max_slack={max(r.max_slack for r in reports):.3e}")
            return 1 if total else 0
        fcfg, pcfg = load_config(args.config)
        runner = Runner(fcfg, pcfg, args.out_dir, args.seed, args.variant)
        if args.command == "pipeline":
            manifest = runner.run()
        else:
            manifest = runner.run_stage(args.command)
        summary = manifest.get("summary", {})
        if summary:
            print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(summary.items())))
        return 0
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DatasetError, ComparisonError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
