"""Command-line entry point: ``python -m cardioforge <command> [flags]``."""
import argparse
import json
import logging
import sys
from typing import Optional, Sequence

import torch

from cardioforge.load_cfg import LOG_FILE, LOG_LEVEL, WORKING_DIRECTORY
from cardioforge.logger import setup_logger
from cardioforge.node import run_command
from cardioforge.router import COMMANDS
from cardioforge.state import RunState

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cardioforge",
                                     description="Heart-sound classification pipeline on PCG / ECG recordings.")
    parser.add_argument("command", choices=COMMANDS, help="Pipeline step to run")
    parser.add_argument("--config", default=None,
                        help="Run config: YAML path or packaged preset name (default: desk)")
    parser.add_argument("--out", default=WORKING_DIRECTORY, help="Run directory shared by all commands")
    parser.add_argument("--seed", type=int, default=None, help="Master seed; overrides the config")
    parser.add_argument("--jobs", type=int, default=1, help="Worker processes for per-subject stages")
    parser.add_argument("--deterministic", action="store_true",
                        help="Sequential reductions, single-threaded torch and deterministic kernels")
    parser.add_argument("--fold", type=int, default=None, help="Fold index (multichannel mode)")
    parser.add_argument("--run-id", default=None, help="Run identifier of a repeated experiment")
    parser.add_argument("--manifest", default=None, help="Original-data manifest (default: the run's fixtures)")
    parser.add_argument("--n-subjects", type=int, default=None, help="Fixture subjects to generate")
    parser.add_argument("--log-file", default=LOG_FILE)
    parser.add_argument("--log-level", default=LOG_LEVEL)
    return parser


def set_determinism(enabled: bool) -> None:
    if not enabled:
        return
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    logger.info("Determinism mode: deterministic algorithms, one torch thread, sequential workers")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command and report it.

    The completion summary goes to stdout as one JSON line; failures go to
    stderr as a JSON object with command, error type, message and context.

    Returns:
        int: 0 on success, 1 for validation or config errors, 2 for runtime failures.
    """
    args = build_parser().parse_args(argv)
    setup_logger(args.log_file, args.log_level)
    if args.jobs < 1:
        print(json.dumps({"command": args.command, "error_type": "ArgumentError",
                          "message": f"--jobs must be >= 1, got {args.jobs}", "context": {"jobs": args.jobs}}),
              file=sys.stderr)
        return 1
    set_determinism(args.deterministic)

    state: RunState = {
        "command": args.command,
        "config": None,
        "config_ref": args.config,
        "out_dir": args.out,
        "seed": args.seed,
        "jobs": 1 if args.deterministic else args.jobs,
        "deterministic": args.deterministic,
        "fold": args.fold,
        "run_id": args.run_id,
        "manifest": args.manifest,
        "n_subjects": args.n_subjects,
        "artifacts": [],
    }
    state = run_command(state)
    if state.get("error"):
        print(json.dumps(state["error"], sort_keys=True, default=str), file=sys.stderr)
        return state.get("exit_code", 2)
    print(json.dumps(state["summary"], sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
