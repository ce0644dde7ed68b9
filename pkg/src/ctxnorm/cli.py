"""Command-line front end.

Subcommands:
  run <config.json> [--seed N] [--out DIR] [--epochs N]  - comparison run
  table <report_dir>                                     - summary table
  gradcheck [--tolerance T] [--seeds N]                  - oracle suite
Flag values override config-file values.
"""

import argparse
import sys

from .experiment import ExperimentConfig, emit_summary_table, run_experiment
from .gradcheck import run_suite


def _cmd_run(args):
    config = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.epochs = args.epochs
    report, failed = run_experiment(config, out_dir=args.out)
    print(f"report written to {report}")
    if failed:
        print(f"FAILED methods: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _cmd_table(args):
    print(emit_summary_table(args.report_dir))
    return 0


def _cmd_gradcheck(args):
    rows, ok = run_suite(seeds=range(args.seeds), tolerance=args.tolerance)
    for row in rows:
        status = "PASS" if row["ok"] else "FAIL"
        print(
            f"{status} {row['layer']:<9} max_rel_err={row['max_rel_err']:.3e} "
            f"tolerance={row['tolerance']:.0e}"
        )
    return 0 if ok else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="ctxnorm")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a normalization comparison experiment")
    p_run.add_argument("config", help="path to the experiment config JSON")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.add_argument("--epochs", type=int, default=None)
    p_run.set_defaults(func=_cmd_run)

    p_table = sub.add_parser("table", help="print the summary table for a report")
    p_table.add_argument("report_dir")
    p_table.set_defaults(func=_cmd_table)

    p_grad = sub.add_parser("gradcheck", help="run the gradient oracle suite")
    p_grad.add_argument("--tolerance", type=float, default=None)
    p_grad.add_argument("--seeds", type=int, default=5)
    p_grad.set_defaults(func=_cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
