"""Command-line entry point.

Usage::

    metrovuln all --config run.json --out out/
    metrovuln estimate --out out/

Exit status is 0 on success, 2 when a stage precondition is unmet (for
instance ``estimate`` before ``match``) or the arguments are invalid, and 1
for any other error.
"""
import argparse
import json
import sys
import warnings

from . import __version__
from .config import PipelineConfig
from .pipeline import STAGES, StageError, run_all, run_stage

COMMANDS = STAGES + ("all",)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="metrovuln",
        description="Estimate station-level metro vulnerability from disruption data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=COMMANDS, help="pipeline stage to run")
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--data-dir", help="directory with the five input CSVs")
    parser.add_argument("--interval-min", type=int, help="slot length in minutes")
    parser.add_argument("--threshold-min", type=int, help="minimum incident length in minutes")
    parser.add_argument("--match-m", type=int, help="controls per treated unit")
    parser.add_argument("--kl-eps", type=float, help="KL smoothing constant (0 disables)")
    parser.add_argument("--trees", type=int, help="trees per imputation forest")
    parser.add_argument("--select", action="store_true",
                        help="likelihood-ratio forward selection of propensity terms")
    return parser


def resolve_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    d = cfg.to_dict()
    for flag, key in (("seed", "seed"), ("out", "out"), ("data_dir", "data_dir"),
                      ("interval_min", "interval_min"), ("threshold_min", "threshold_min"),
                      ("kl_eps", "kl_eps")):
        value = getattr(args, flag)
        if value is not None:
            d[key] = value
    if args.match_m is not None:
        d["match"]["M"] = args.match_m
    if args.trees is not None:
        d["forest"]["trees"] = args.trees
    if args.select:
        d["select"] = True
    return PipelineConfig.from_dict(d)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"metrovuln: config error: {exc}", file=sys.stderr)
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            entries = run_all(cfg) if args.command == "all" else [run_stage(cfg, args.command)]
    except StageError as exc:
        print(f"metrovuln: {exc}", file=sys.stderr)
        return exc.status
    except Exception as exc:  # noqa: BLE001 - reported, nonzero exit
        print(f"metrovuln: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for e in entries:
        n_warn = len(e["warnings"])
        print(f"{e['stage']:<11} ok  {e['duration_s']:8.2f}s  "
              f"{json.dumps(e['counts'], sort_keys=True, default=str)[:120]}"
              + (f"  ({n_warn} warning(s), see run.log)" if n_warn else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
