"""Command-line entry point.

    abssim run CONFIG [--out DIR] [--seed-override 1,2,3] [--jobs N]
    abssim sweep CONFIG --grid "k0=2,3;a=-2,-1" [--out DIR]
    abssim report DIR --normalize SCENARIO
    abssim theory CONFIG [--trials N]

Exit codes: 0 success, 2 config error, 3 every seed diverged, 4 baseline missing.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .cli_report import (BaselineError, all_diverged, load_summaries, normalize_times,
                         parse_grid, run_scenario, sweep, _json_default)
from .config import load_config
from .engine import run
from .errors import ConfigError
from .problems import build_problem

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_BASELINE = 0, 2, 3, 4


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")


def _load(args):
    config = load_config(args.config)
    if args.seed_override:
        config = config.model_copy(update={"seeds": args.seed_override})
    return config


def cmd_run(args):
    config = _load(args)
    summary = run_scenario(config, args.out, jobs=args.jobs)
    print(json.dumps({k: summary[k] for k in ("scenario", "time_to_target", "comm_to_target",
                                              "final_loss", "diverged_count")},
                     default=_json_default))
    return EXIT_DIVERGED if all_diverged(summary) else EXIT_OK


def cmd_sweep(args):
    config = _load(args)
    rows = sweep(config, parse_grid(args.grid), args.out, jobs=args.jobs)
    for r in rows:
        print(f"{r['rank_time']:>3} {r['rank_comm']:>3}  {r['scenario']:<30} "
              f"time={r['time_to_target']} comm={r['comm_to_target']}")
    if all(r["diverged_count"] == len(config.seeds) for r in rows):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_report(args):
    summaries = load_summaries(args.dir)
    try:
        normalized = normalize_times(summaries, args.normalize)
    except BaselineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BASELINE
    path = Path(args.dir) / "report.csv"
    cols = ["scenario", "normalized_time", "comm_to_target", "final_loss", "diverged_count"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for name, s in sorted(normalized.items()):
            writer.writerow([name, s["time_to_target"], s["comm_to_target"], s["final_loss"],
                             s["diverged_count"]])
            print(f"{name:<30} time={s['time_to_target']} comm={s['comm_to_target']}")
    return EXIT_OK


def cmd_theory(args):
    """Theory report on tracked runs plus the two Monte Carlo lemma checks."""
    config = _load(args)
    problem = build_problem(config.problem_spec())
    hp, strat = config.hyper_params(), config.strategy_config()
    results = [run(problem, hp, strat, config.latency_model(), config.n_workers, s,
                   config.stop_rule(), track=True) for s in config.seeds]
    report = analysis.theory_report(problem, results, hp.batch_size, strat.k0,
                                    hp.local_steps, hp.lr, config.n_workers)
    if "constants" in report:
        rng = np.random.default_rng(config.seeds[0])
        w0 = problem.initial_model()
        w1 = results[0].final_model
        c = report["constants"]
        l1 = analysis.lemma1_check(problem, w1, w0, hp.batch_size, args.trials, rng)
        models = [t.model for t in results[0].traces[: strat.k0]]
        l2 = analysis.lemma2_check(problem, models, hp.batch_size, args.trials, rng,
                                   c["sigma2"], c["m_g"], c["m"])
        report["lemma1"] = vars(l1)
        report["lemma2"] = vars(l2)
    print(json.dumps(report, indent=2, default=_json_default))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="abssim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config")
    common.add_argument("--seed-override", type=_seeds, default=None,
                        help="comma-separated seeds replacing the config's list")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel seed workers")

    p = sub.add_parser("run", parents=[common], help="run one scenario over its seeds")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", parents=[common], help="grid over k0 and a")
    p.add_argument("--grid", required=True, help='e.g. "k0=2,3;a=-2,-1"')
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("report", help="normalise summaries in a directory")
    p.add_argument("dir")
    p.add_argument("--normalize", required=True, metavar="SCENARIO")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("theory", parents=[common], help="theory checks only")
    p.add_argument("--trials", type=int, default=20_000)
    p.set_defaults(func=cmd_theory)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
