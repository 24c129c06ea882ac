"""Command line entry point: one subcommand per pipeline stage, plus ``all``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .pipeline import STAGES, ExperimentConfig, Lab, PipelineError

EXIT_GATE = 3
EXIT_PIPELINE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kloc", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override the config's global seed")
    common.add_argument("--out", help="output directory (default: $KLOC_OUT or ./kloc_out)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES + ("all",):
        p = sub.add_parser(stage, parents=[common])
        if stage in ("trace", "sever-trace", "edit"):
            p.add_argument("--perspective", choices=["entity", "relation"])
        if stage == "trace":
            p.add_argument("--site", choices=["hidden", "mlp", "attn"])
        if stage == "sever-trace":
            p.add_argument("--sever", choices=["none", "mlp", "attn"])
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        lab = Lab(args.out or os.environ.get("KLOC_OUT", "kloc_out"), load_config(args))
        stages = STAGES if args.stage == "all" else (args.stage,)
        ok = True
        for stage in stages:
            options = {k: getattr(args, k) for k in ("perspective", "site", "sever") if getattr(args, k, None)}
            passed = lab.run(stage, **options)
            print(f"{stage}: gate {'passed' if passed else 'FAILED'}")
            ok &= passed
    except (PipelineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return 0 if ok else EXIT_GATE


if __name__ == "__main__":
    sys.exit(main())
