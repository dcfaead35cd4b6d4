"""Command-line entry point: ``semanticbbv <command> [--config F] [--seed N] [--workdir D]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .artifacts import HashMismatch, MissingArtifact
from .config import ConfigInvalid, load_config

WORKDIR_ENV = "SBBV_WORKDIR"

COMMANDS = {
    "gen": "generate workloads, traces and oracle CPIs",
    "ingest": "segment traces into blocks, intervals and traditional BBVs",
    "pretrain": "pre-train the block encoder (next token + next instruction)",
    "finetune-encoder": "triplet fine-tune the encoder on transformed functions",
    "embed": "embed every distinct basic block",
    "train-aggregator": "train the set aggregator and CPI head",
    "sign": "compute interval signatures",
    "cluster": "global k-means over evaluation signatures",
    "estimate": "estimate program CPI (--mode intra|cross)",
    "adapt": "fine-tune the aggregator for the second cost model",
    "eval-bcsd": "similarity-retrieval evaluation (MRR, Recall@1)",
    "gradcheck": "finite-difference gradient check at tiny scale",
    "report": "summarize evaluation results",
    "all": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--workdir", help=f"artifact directory (default ${WORKDIR_ENV} or ./work)")
    common.add_argument("--k", type=int, help="cluster count (overrides the config)")
    common.add_argument("--interval-len", type=int, help="interval length (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="semanticbbv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "estimate":
            p.add_argument("--mode", choices=("intra", "cross"), required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workdir = Path(args.workdir or os.environ.get(WORKDIR_ENV) or "work")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "k": args.k, "interval_len": args.interval_len})
        from . import pipeline as pl

        runners = {
            "gen": pl.run_gen, "ingest": pl.run_ingest, "pretrain": pl.run_pretrain,
            "finetune-encoder": pl.run_finetune_encoder, "embed": pl.run_embed,
            "train-aggregator": pl.run_train_aggregator, "sign": pl.run_sign, "cluster": pl.run_cluster,
            "adapt": pl.run_adapt, "eval-bcsd": pl.run_eval_bcsd, "gradcheck": pl.run_gradcheck,
            "report": pl.run_report, "all": pl.run_all,
        }
        if args.command == "estimate":
            result = pl.run_estimate(cfg, workdir, args.mode)
        else:
            if args.command == "report" and not workdir.exists():
                raise MissingArtifact(f"workdir {workdir} does not exist; run the pipeline first")
            workdir.mkdir(parents=True, exist_ok=True)
            result = runners[args.command](cfg, workdir)
    except ConfigInvalid as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return 3
    except HashMismatch as exc:
        print(f"error: hash mismatch: {exc}", file=sys.stderr)
        return 4
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    if args.command == "gradcheck" and not result.get("passed", False):
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
