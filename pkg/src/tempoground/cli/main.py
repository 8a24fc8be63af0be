"""argparse entry point: `tempoground <command> [--config FILE] [--key=value ...]`."""

from __future__ import annotations

import argparse
import sys

from tempoground.cli.config import DEFAULTS, resolve_config
from tempoground.cli import pipeline
from tempoground.errors import TempogroundError

COMMANDS = {
    "gen": (pipeline.cmd_gen, "generate the synthetic train/eval datasets"),
    "stage1": (pipeline.cmd_stage1, "predictive temporal pretraining"),
    "stage2": (pipeline.cmd_stage2, "proposal warm-up + standalone quality metrics"),
    "pool": (pipeline.cmd_pool, "build and serialize evidence pools"),
    "stage3": (pipeline.cmd_stage3, "identify-then-measure fine-tuning"),
    "ground": (pipeline.cmd_ground, "run grounding, write predictions"),
    "eval": (pipeline.cmd_eval, "compute the metric report from predictions"),
    "diagnose": (pipeline.cmd_diagnose, "stage-wise, citation-gap, stability, and latent-geometry outputs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempoground",
        description="Predictive temporal perception and evidence-cited span grounding.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None, help="key = value config file")
    sub.add_parser("config", help="print every config key, default, and description")
    sub.add_parser("pipeline", help="run gen through eval in order").add_argument(
        "--config", default=None, help="key = value config file"
    )
    return parser


def _split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Separate --key=value overrides (keys contain a dot) from real args."""
    args, overrides = [], []
    for item in argv:
        if item.startswith("--") and "=" in item and "." in item.split("=", 1)[0]:
            overrides.append(item[2:])
        else:
            args.append(item)
    return args, overrides


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args, overrides = _split_overrides(argv)
    parser = build_parser()
    ns = parser.parse_args(args)
    if ns.command == "config":
        for key, (default, help_text) in DEFAULTS.items():
            print(f"{key:28s} = {default!r:18} # {help_text}")
        return 0
    try:
        cfg = resolve_config(getattr(ns, "config", None), overrides)
        if ns.command == "pipeline":
            for name in ("gen", "stage1", "stage2", "pool", "stage3", "ground", "eval"):
                COMMANDS[name][0](cfg)
        else:
            COMMANDS[ns.command][0](cfg)
    except TempogroundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
