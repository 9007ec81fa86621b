#!/usr/bin/env python3
"""
fbsde_cli.py
Command-line entry point for the state-constrained deep FBSDE controller.

- CLI usage:
    python fbsde_cli.py train --config cartpole_task1 --out runs/task1
    python fbsde_cli.py train --config cartpole_task1 --out runs/fixed --fixed-k 6.0
    python fbsde_cli.py eval --config cartpole_task1 --checkpoint runs/task1/checkpoint.json --out runs/task1
    python fbsde_cli.py penalty-curve --out runs/penalty_curve.csv
    python fbsde_cli.py inspect-checkpoint runs/task1/checkpoint.json

Exit codes: 0 success, 2 configuration / checkpoint / dimension error,
3 training aborted after repeated divergence.
"""

import argparse
import os
import sys
from typing import List, Optional

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from experiment_config import ConfigError, ExperimentConfig, dump_config, load_config, with_overrides  # noqa: E402
from experiment_runner import (CURVE_BOUNDS, CURVE_CEILING, CURVE_KS, ExperimentRunner, describe_checkpoint,  # noqa: E402
                               dump_json, write_penalty_curve)
from step_4_training.checkpoint import CheckpointError  # noqa: E402


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _exit_code(results: dict) -> int:
    if "error" not in results:
        return EXIT_OK
    return EXIT_DIVERGENCE if results.get("error_kind") == "divergence" else EXIT_CONFIG


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return with_overrides(cfg, seed=args.seed, iterations=getattr(args, "iterations", None),
                          trials=getattr(args, "trials", None))


def cmd_train(args) -> int:
    cfg = _load(args)
    runner = ExperimentRunner(cfg, args.out)
    dump_config(cfg, os.path.join(args.out, "config.yaml"))
    results = runner.run_training(fixed_k=args.fixed_k, resume=args.resume)
    if "error" in results:
        print(f"❌ Training failed: {results['error']}")
        return _exit_code(results)

    print("\n" + "=" * 50)
    print("🎯 TRAINING COMPLETED")
    print("=" * 50)
    print(f"📋 Iterations run: {results['iterations_run']}")
    print(f"⚠️  Divergence events: {results['divergences']}")
    print(f"🔧 Final k: {results['final_k']:.4f}")
    print(f"💾 Checkpoint: {results['checkpoint']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    runner = ExperimentRunner(cfg, args.out)
    results = runner.run_evaluation(args.checkpoint, args.trials)
    if "error" in results:
        print(f"❌ Evaluation failed: {results['error']}")
        return _exit_code(results)

    print("\n" + "=" * 50)
    print("🎯 EVALUATION COMPLETED")
    print("=" * 50)
    print(f"📋 Trials: {results['trials']}")
    print(f"📊 Violation fraction: {results['violation_fraction']:.4f} "
          f"({results['violation_fraction_with_margin']:.4f} with {results['violation_margin']:.0%} margin)")
    print(f"🎯 Mean terminal state: {results['terminal_state']['mean']}")
    if "energy" in results:
        print(f"⚡ Max total energy: {results['energy']['max']:.4f} J")
    return EXIT_OK


def cmd_penalty_curve(args) -> int:
    grid = None
    if args.grid:
        low, high, count = args.grid
        if int(count) < 1:
            print("❌ Grid needs at least one point")
            return EXIT_CONFIG
        grid = [low + (high - low) * i / max(int(count) - 1, 1) for i in range(int(count))]
    try:
        df = write_penalty_curve(args.out, ks=args.ks, grid=grid, c_min=args.bounds[0], c_max=args.bounds[1],
                                 ceiling=args.ceiling)
    except ValueError as e:
        print(f"❌ {e}")
        return EXIT_CONFIG
    print(f"💾 Penalty curve with {len(df)} rows written to: {args.out}")
    return EXIT_OK


def cmd_inspect_checkpoint(args) -> int:
    print(dump_json(describe_checkpoint(args.checkpoint)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description="State-constrained deep FBSDE controller: train, evaluate, inspect.")
    sub = ap.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train a controller from a config or preset")
    train.add_argument("--config", required=True, help="YAML config path or preset name (cartpole_task1, cartpole_task2)")
    train.add_argument("--out", required=True, help="Output directory for checkpoints and logs")
    train.add_argument("--seed", type=int, default=None, help="Override trainer.seed")
    train.add_argument("--iterations", type=int, default=None, help="Override trainer.iterations")
    train.add_argument("--fixed-k", type=float, default=None, help="Train at this steepness with the scheduler off")
    train.add_argument("--resume", default=None, help="Checkpoint to resume from")
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("eval", help="Evaluate a trained checkpoint")
    evaluate.add_argument("--config", required=True, help="YAML config path or preset name")
    evaluate.add_argument("--checkpoint", default=None, help="Checkpoint file (default: <out>/checkpoint.json)")
    evaluate.add_argument("--out", required=True, help="Output directory for the evaluation report")
    evaluate.add_argument("--seed", type=int, default=None, help="Override trainer.seed")
    evaluate.add_argument("--trials", type=int, default=None, help="Number of trials (default: 256)")
    evaluate.set_defaults(func=cmd_eval)

    curve = sub.add_parser("penalty-curve", help="Export p(x) for several steepness values as CSV")
    curve.add_argument("--out", required=True, help="CSV file to write")
    curve.add_argument("--ks", type=_float_list, default=list(CURVE_KS), help="Comma-separated k values")
    curve.add_argument("--bounds", type=float, nargs=2, default=list(CURVE_BOUNDS), metavar=("C_MIN", "C_MAX"))
    curve.add_argument("--ceiling", type=float, default=CURVE_CEILING, help="Plateau value L")
    curve.add_argument("--grid", type=float, nargs=3, default=None, metavar=("LOW", "HIGH", "COUNT"))
    curve.set_defaults(func=cmd_penalty_curve)

    inspect = sub.add_parser("inspect-checkpoint", help="Print a checkpoint's contents")
    inspect.add_argument("checkpoint", help="Checkpoint file")
    inspect.set_defaults(func=cmd_inspect_checkpoint)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as e:
        print(f"❌ {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    exit(main())
