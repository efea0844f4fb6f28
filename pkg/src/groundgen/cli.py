"""Command-line entry point.

    groundgen <command> --config PATH [--seed N] [--out DIR] [--device NAME]

Commands: gen-data, train-scorer, train-codec, train-stage1, train-stage2,
sample, evaluate, ablate, report.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import ConfigError, load_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groundgen")
    parser.add_argument("command", choices=sorted(pipeline.COMMANDS))
    parser.add_argument("--config", required=True, help="path to a JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--device", default=None, help="override compute device")
    parser.add_argument("--variant", default="full",
                        help="stage-2 variant: full|no_grounding|no_consistency|no_icp")
    parser.add_argument("--prompt", default=None, help="prompt words for `sample`")
    parser.add_argument("--num-samples", type=int, default=1)
    parser.add_argument("--ablation-seed", type=int, default=None,
                        help="run the ablation for one seed only (used by --jobs fan-out)")
    return parser


def dispatch(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.device is not None:
        cfg.device = args.device
    pipeline.apply_runtime(cfg)

    command = args.command
    if command == "train-stage2":
        result = pipeline.cmd_train_stage2(cfg, variant=args.variant)
    elif command == "evaluate":
        result = pipeline.cmd_evaluate(cfg, variant=args.variant)
    elif command == "sample":
        result = pipeline.cmd_sample(
            cfg, prompt=args.prompt, n=args.num_samples, variant=args.variant
        )
    elif command == "ablate":
        result = pipeline.cmd_ablate(
            cfg, config_path=args.config, only_seed=args.ablation_seed
        )
    elif command == "report":
        result = pipeline.cmd_report(cfg, variant=args.variant)
    else:
        result = pipeline.COMMANDS[command](cfg)
    printable = {
        k: v for k, v in (result or {}).items() if k not in ("details", "table")
    }
    print(json.dumps(printable, sort_keys=True, default=str))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except (ConfigError, pipeline.MissingArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # keep the CLI contract: nonzero exit on any error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
