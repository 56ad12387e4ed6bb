"""Command-line interface: one subcommand per pipeline stage.

    mapo warmup|sft|reward|rl|eval --config config.yaml [--seed N] [--force]
    mapo optimize --config config.yaml --prompt "..." --task generation

Endpoint credentials come from the MAPO_ENDPOINT_TOKEN environment
variable (attached as a bearer header on remote calls).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from mapo.errors import MapoError
from mapo.pipeline import stages
from mapo.pipeline.config import load_config
from mapo.text_metrics import TaskKind

TASK_CHOICES = {
    "qa": TaskKind.QUESTION_ANSWERING,
    "classification": TaskKind.CLASSIFICATION,
    "generation": TaskKind.GENERATION,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("warmup", "sft", "reward", "rl", "eval"):
        p = sub.add_parser(name, help=f"run the {name} stage")
        _common(p)
        p.add_argument("--force", action="store_true", help="rerun a completed stage")
    opt = sub.add_parser("optimize", help="rewrite one prompt with the trained model")
    _common(opt)
    opt.add_argument("--prompt", required=True)
    opt.add_argument("--task", required=True, choices=sorted(TASK_CHOICES))
    return parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to the pipeline config YAML")
    p.add_argument("--seed", type=int, default=None, help="override the stage seed")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None and args.command in config.seeds:
            config.seeds[args.command] = args.seed
        if args.command == "optimize":
            print(stages.cmd_optimize(config, args.prompt, TASK_CHOICES[args.task]))
            return 0
        runner = {
            "warmup": stages.cmd_warmup,
            "sft": stages.cmd_sft,
            "reward": stages.cmd_reward,
            "rl": stages.cmd_rl,
            "eval": stages.cmd_eval,
        }[args.command]
        result = runner(config, force=args.force)
        print(json.dumps(_summary(result), sort_keys=True))
        return 0
    except MapoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _summary(result: dict) -> dict:
    out = {}
    for key, value in result.items():
        if isinstance(value, list):
            out[key] = value[-1] if value else None
        else:
            out[key] = value
    return out


if __name__ == "__main__":
    raise SystemExit(main())
