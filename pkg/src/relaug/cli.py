"""Command-line entry point.

Subcommands: gen-data, pretrain, build-bank, train, eval, ablate,
export-embeddings.  Global flags --config (TOML), --seed, --out.  Exit code 0
on success; on failure a single `error: ...` line goes to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import train as stages
from .config import load_config
from .errors import RelaugError
from .metrics import format_report


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relaug")
    parser.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out", type=Path, default=None, help="override the output directory")
    parser.add_argument("--allow-mismatch", action="store_true",
                        help="proceed even if existing artifacts used a different config")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic benchmark files")
    sub.add_parser("pretrain", help="vanilla prototype training from scratch")
    sub.add_parser("build-bank", help="build the frozen memory bank")

    p_train = sub.add_parser("train", help="retrieval-augmented training")
    p_train.add_argument("--variant", choices=("full", "no_select", "no_ipss"),
                         default="full")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    p_eval.add_argument("--checkpoint", type=Path, default=None)
    p_eval.add_argument("--data", type=Path, default=None)

    p_ablate = sub.add_parser("ablate", help="run the ablation matrix over seeds")
    p_ablate.add_argument("--seeds", type=str, default="7",
                          help="comma-separated seed list, e.g. 1,2,3")

    p_export = sub.add_parser("export-embeddings", help="dump unit embeddings to CSV")
    p_export.add_argument("--checkpoint", type=Path, default=None)
    p_export.add_argument("--data", type=Path, default=None)
    p_export.add_argument("--output", type=Path, default=None)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "gen-data":
            path = stages.gen_data(cfg, allow_mismatch=args.allow_mismatch)
            print(f"wrote {path}")
        elif args.command == "pretrain":
            path = stages.pretrain(cfg, allow_mismatch=args.allow_mismatch)
            print(f"wrote {path}")
        elif args.command == "build-bank":
            path = stages.build_bank_stage(cfg, allow_mismatch=args.allow_mismatch)
            print(f"wrote {path}")
        elif args.command == "train":
            path = stages.train_ra(cfg, variant=args.variant,
                                   allow_mismatch=args.allow_mismatch)
            print(f"wrote {path}")
        elif args.command == "eval":
            report = stages.evaluate_stage(cfg, ckpt_path=args.checkpoint,
                                           data_path=args.data,
                                           allow_mismatch=args.allow_mismatch)
            print(format_report(report))
        elif args.command == "ablate":
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            path = stages.ablate(cfg, seeds)
            print(f"wrote {path}")
        elif args.command == "export-embeddings":
            path = stages.export_embeddings(cfg, ckpt_path=args.checkpoint,
                                            data_path=args.data, out_path=args.output)
            print(f"wrote {path}")
    except (RelaugError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
