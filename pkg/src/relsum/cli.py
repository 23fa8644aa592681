"""Command-line interface: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from .config import ARTIFACT_ENV_VAR, load_config
from .errors import RelsumError
from .logging_setup import setup_logging
from .pipeline import STAGES, Pipeline

logger = logging.getLogger(__name__)

__all__ = ["build_parser", "cli_dispatch"]

COMMANDS = {
    "gen-corpus": "generate the synthetic catalog, queries and judged pairs",
    "train-reward": "train the cross-encoder reward on judged pairs and freeze it",
    "build-dataset": "score proxy labels and keep rows whose description gap reaches tau",
    "pretrain-policy": "clone heuristic summaries into the reference policy",
    "train-grpo": "fine-tune the reference policy with group-relative policy optimisation",
    "train-dpo": "fine-tune the reference policy with direct preference optimisation",
    "summarize": "print the summaries of one product",
    "eval": "offline ranking evaluation of every candidate context",
    "interleave": "simulated team-draft interleaving between two candidates",
    "all": "run every stage in order",
}


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [section] key = value settings")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    common.add_argument("--seed", type=int, help="root seed (overrides the config file)")
    common.add_argument("--artifacts", help=f"artifact directory (default from config or ${ARTIFACT_ENV_VAR})")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--allow-mismatch", action="store_true", help="accept inputs written with another config")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="only warnings, no progress bars")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relsum",
        description="Relevance-driven product summarisation: data, reward, RL fine-tuning and evaluation.",
    )
    subcommands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = _common_options()
    for name, help_text in COMMANDS.items():
        sub = subcommands.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "summarize":
            sub.add_argument("--product", required=True, help="product id, e.g. p00042")
        if name in ("interleave", "all"):
            sub.add_argument(
                "--uniform-queries", action="store_true", help="draw session queries uniformly instead of by traffic"
            )
    return parser


def _report_error(exc: RelsumError) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return exc.exit_code


def cli_dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging("WARNING" if args.quiet else args.log_level)
    try:
        config = load_config(args.config, overrides=args.overrides, seed=args.seed, artifact_dir=args.artifacts)
        pipeline = Pipeline(config, force=args.force, allow_mismatch=args.allow_mismatch, progress=not args.quiet)
        if args.command == "summarize":
            print(pipeline.summarize(args.product), end="")
        elif args.command == "all":
            pipeline.run_all(uniform_queries=args.uniform_queries)
        elif args.command == "interleave":
            payload = pipeline.run("interleave", uniform_queries=args.uniform_queries)
            print(json.dumps({k: v for k, v in payload.items() if k != "header"}, sort_keys=True))
        elif args.command in STAGES:
            pipeline.run(args.command)
    except RelsumError as exc:
        logger.debug("stage failed", exc_info=True)
        return _report_error(exc)
    return 0
