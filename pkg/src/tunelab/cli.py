"""Command-line front end.

Subcommands: pretrain, tune, eval, sweep, familiarity, transform, report.
Exit codes: 0 success, 2 config or input error, 3 runtime training failure.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .errors import TrainingDivergedError, TuneLabError

CONFIG_ERRORS = (TuneLabError, OSError, KeyError, ValueError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tunelab",
        description="Frozen-backbone tuning laboratory: pretrain a small "
                    "sequence model on a synthetic grammar, then compare "
                    "prompt-style tuning modes on controllable tasks.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="train and freeze a backbone")
    sp.add_argument("config", help="experiment config file (YAML)")

    sp = sub.add_parser("tune", help="tune modes x seeds against a checkpoint")
    sp.add_argument("config")

    sp = sub.add_parser("eval", help="score a checkpoint on the task test split")
    sp.add_argument("config")

    sp = sub.add_parser("sweep", help="run one experimental axis")
    sp.add_argument("axis", choices=harness.SWEEP_AXES)
    sp.add_argument("config")

    sp = sub.add_parser("familiarity",
                        help="bigram familiarity and relative performance")
    sp.add_argument("--bigrams", required=True, help="bigram table file")
    sp.add_argument("--corpus", help="tab-separated corpus file to score")
    sp.add_argument("--run", help="run directory of the tuned variant")
    sp.add_argument("--baseline", help="run directory of the full-tuning baseline")
    sp.add_argument("--out", help="write a variant,rp_percent,fam report here")

    sp = sub.add_parser("transform", help="rewrite a corpus file's inputs")
    sp.add_argument("--in", dest="in_path", required=True)
    sp.add_argument("--out", dest="out_path", required=True)
    sp.add_argument("--kind", required=True,
                    help="identity | familiar_plus | unfamiliar_remap_keys | "
                         "unfamiliar_remap_all")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--task-kind", default="table_to_text",
                    help="which task lexicon defines the key/value tokens")

    sp = sub.add_parser("report", help="summarize run dirs and sweep CSVs")
    sp.add_argument("paths", nargs="+")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "pretrain":
            harness.run_pretrain(harness.load_experiment(args.config))
        elif args.command == "tune":
            harness.run_tune(harness.load_experiment(args.config))
        elif args.command == "eval":
            harness.run_eval(harness.load_experiment(args.config))
        elif args.command == "sweep":
            harness.run_sweep(args.axis, harness.load_experiment(args.config))
        elif args.command == "familiarity":
            harness.run_familiarity(args.bigrams, corpus_path=args.corpus,
                                    run_dir=args.run, baseline_dir=args.baseline,
                                    out_path=args.out)
        elif args.command == "transform":
            harness.run_transform(args.in_path, args.out_path, args.kind,
                                  seed=args.seed, task_kind=args.task_kind)
        elif args.command == "report":
            harness.run_report(args.paths, out_path=args.out)
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
