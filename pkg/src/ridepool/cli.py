"""Command-line entry point: ``python -m ridepool {train,eval,simulate,bench}``.

Success prints a JSON result on stdout and exits 0. Failure prints a single
line ``error kind=<Type> [field=<name>] message="..."`` on stderr and exits
2 for bad input (config, CSV, checkpoint) or 1 for anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, SimConfig, load_config
from .harness import (
    CheckpointMismatch,
    OrderCsvError,
    load_orders_csv,
    load_policy,
    replay_factory,
    run_bench,
    run_eval,
    run_simulation,
    run_training,
)
from .nn import CheckpointError

INPUT_ERRORS = (ConfigError, OrderCsvError, CheckpointError, CheckpointMismatch, FileNotFoundError)


class UsageError(ValueError):
    pass


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ridepool", description="Ride-pooling dispatch: train, evaluate, simulate, benchmark.")
    p.add_argument("--out", default="runs", help="root directory for run folders (default: runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a dispatch policy")
    t.add_argument("--config", required=True, type=Path)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or the greedy baseline)")
    who = e.add_mutually_exclusive_group(required=True)
    who.add_argument("--checkpoint", type=Path)
    who.add_argument("--greedy", action="store_true", help="evaluate the nearest-driver baseline")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--orders", type=Path, help="order CSV to replay")
    src.add_argument("--synthetic", action="store_true", help="use the synthetic demand generator")
    e.add_argument("--seeds", type=_seeds, default=list(range(1000, 1010)))
    e.add_argument("--config", type=Path, help="simulator settings (defaults otherwise)")

    s = sub.add_parser("simulate", help="play one noise-free episode and write a step trace")
    s.add_argument("--policy", choices=("greedy", "checkpoint"), required=True)
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--config", type=Path)
    s.add_argument("--orders", type=Path)
    s.add_argument("--seed", type=int)

    b = sub.add_parser("bench", help="time training episodes by phase")
    b.add_argument("--config", required=True, type=Path)
    b.add_argument("--episodes", type=int, default=3)
    return p


def _sim(config: Path | None) -> tuple[SimConfig, RunConfig | None]:
    if config is None:
        return SimConfig(), None
    cfg = load_config(config)
    return cfg.sim, cfg


def _dispatch(args: argparse.Namespace) -> dict:
    if args.command == "train":
        m = run_training(args.config, args.out)
        return {"run_dir": str(m.run_dir), "best_episode": m.best_episode, "best_score": m.best_score,
                "checkpoints": m.checkpoint_hashes, "wall_clock_s": m.wall_clock_s}
    if args.command == "eval":
        sim, _ = _sim(args.config)
        report, run_dir = run_eval(None if args.greedy else args.checkpoint, args.seeds, sim, args.orders, args.out)
        return {"run_dir": str(run_dir), "seeds": report.seeds, "metrics": report.summary}
    if args.command == "simulate":
        sim, cfg = _sim(args.config)
        if args.policy == "checkpoint":
            if args.checkpoint is None:
                raise UsageError("--policy checkpoint needs --checkpoint")
            params = load_policy(args.checkpoint, sim)
        else:
            params = None
        orders = args.orders or (cfg.orders_csv if cfg else None)
        factory = replay_factory(load_orders_csv(orders, sim), sim) if orders else None
        trace, metrics, run_dir = run_simulation(sim, params, args.seed, factory, args.out)
        return {"run_dir": str(run_dir), "steps": len(trace), "metrics": metrics.as_row()}
    if args.command == "bench":
        report, run_dir = run_bench(args.config, args.episodes, args.out)
        return {"run_dir": str(run_dir), **report}
    raise UsageError(f"unknown command {args.command!r}")


def _error_line(exc: BaseException) -> str:
    parts = [f"kind={type(exc).__name__}"]
    name = getattr(exc, "field_name", None)
    if name:
        parts.append(f"field={name}")
    parts.append("message=" + json.dumps(str(exc)))
    return "error " + " ".join(parts)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse has already printed usage; keep its exit code (2 on bad usage, 0 for --help)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _dispatch(args)
    except (*INPUT_ERRORS, UsageError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI contract is one line, never a traceback
        print(_error_line(exc), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0
