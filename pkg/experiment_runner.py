#!/usr/bin/env python3
"""
experiment_runner.py
Train / evaluate orchestration for one experiment configuration.
Writes checkpoints, the training log and evaluation artifacts into an output
directory; every file is written to a temporary sibling and moved into place.
"""

import json
import logging
import os
from dataclasses import replace
from datetime import datetime
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from config import LOG_DIR, LOG_LEVEL
from experiment_config import (ConfigError, ExperimentConfig, build_costs, build_model, build_network,
                               build_optimizer, build_rollout, build_scheduler, build_train_run)
from step_1_autodiff.tensor_ad import ShapeError
from step_2_model.cost_constraints import BoxConstraint, PenaltySpec, penalty_curve
from step_3_controller.fbsde_rollout import EvaluationReport, evaluate
from step_3_controller.valuenet import ValueNetwork
from step_4_training.checkpoint import (FORMAT_TAG, Checkpoint, CheckpointError, check_dimensions, load_checkpoint,
                                        write_json_atomic)
from step_4_training.scheduler import SchedulerState
from step_4_training.trainer import OptimizerState, Trainer, TrainingAborted
from training_logger import TrainingLogger

STATE_NAMES = ["x", "theta", "x_dot", "theta_dot"]

# Penalty-curve defaults: midpoint 1, plateau 100, bounds (-1, 3)
CURVE_BOUNDS = (-1.0, 3.0)
CURVE_CEILING = 100.0
CURVE_KS = (1.0, 2.0, 4.0, 8.0)


def _atomic_csv(df: pd.DataFrame, path: str) -> str:
    tmp_path = path + ".tmp"
    df.to_csv(tmp_path, index=False)
    os.replace(tmp_path, path)
    return path


def _atomic_npz(path: str, **arrays: np.ndarray) -> str:
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp_path, path)
    return path


def envelope_frame(report: EvaluationReport) -> pd.DataFrame:
    """Long format: one row per (timestep, state dimension) with t, dim, min, max, mean."""
    steps, n = report.envelope_min.shape
    return pd.DataFrame({
        "t": np.repeat(report.times, n),
        "dim": np.tile([STATE_NAMES[i] if i < len(STATE_NAMES) else str(i) for i in range(n)], steps),
        "min": report.envelope_min.ravel(),
        "max": report.envelope_max.ravel(),
        "mean": report.envelope_mean.ravel(),
    })


def terminal_frame(report: EvaluationReport) -> pd.DataFrame:
    terminal = report.states[:, -1]
    df = pd.DataFrame(terminal, columns=STATE_NAMES[:terminal.shape[1]])
    df.insert(0, "trial", np.arange(terminal.shape[0]))
    return df


class ExperimentRunner:
    """Runs training and evaluation for one experiment configuration."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str, log_dir: Optional[str] = None):
        self.cfg = cfg
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.model = build_model(cfg)
        self.costs = build_costs(cfg, self.model)
        self.net = build_network(cfg, self.model)
        self.rollout_cfg = build_rollout(cfg)

        # Setup logging
        self.setup_logging(log_dir or LOG_DIR)

    def setup_logging(self, log_dir: str):
        """Setup logging for the experiment runs."""
        os.makedirs(log_dir, exist_ok=True)

        log_file = os.path.join(log_dir, f"fbsde_{datetime.now().strftime('%Y%m%d')}.log")

        logging.basicConfig(
            level=getattr(logging, LOG_LEVEL, logging.INFO),
            format='%(asctime)s - %(levelname)s - %(message)s',
            handlers=[
                logging.FileHandler(log_file, encoding='utf-8'),
                logging.StreamHandler()
            ]
        )

        self.logger = logging.getLogger(__name__)

    @property
    def checkpoint_path(self) -> str:
        return os.path.join(self.out_dir, "checkpoint.json")

    def load_compatible(self, path: str) -> Checkpoint:
        """Load a checkpoint and verify its blocks fit the configured network."""
        checkpoint = load_checkpoint(path)
        check_dimensions(checkpoint, self.net.spec.block_shapes())
        return checkpoint

    def build_trainer(self, fixed_k: Optional[float] = None, resume: Optional[str] = None,
                      training_logger: Optional[TrainingLogger] = None) -> Trainer:
        run = build_train_run(self.cfg)
        training_logger = training_logger or TrainingLogger(os.path.join(self.out_dir, "training_log.ndjson"))
        meta = {"config": self.cfg.to_dict(), "state_dim": self.model.state_dim,
                "control_dim": self.model.control_dim}

        if resume:
            checkpoint = self.load_compatible(resume)
            scheduler = SchedulerState.from_dict(checkpoint.scheduler)
            if fixed_k is not None:
                scheduler = replace(scheduler, k=fixed_k, fixed=True)
            self.logger.info(f"🔁 Resuming from {resume} at iteration {checkpoint.iteration}")
            return Trainer(self.model, self.costs, self.net, self.rollout_cfg, run, scheduler, checkpoint.params,
                           self.out_dir, training_logger, optimizer=OptimizerState.from_dict(checkpoint.optimizer),
                           start_iteration=checkpoint.iteration, meta=meta)

        params = self.net.init_params(np.random.default_rng(self.cfg.trainer.seed))
        return Trainer(self.model, self.costs, self.net, self.rollout_cfg, run, build_scheduler(self.cfg, fixed_k),
                       params, self.out_dir, training_logger, optimizer=build_optimizer(self.cfg), meta=meta)

    def run_training(self, fixed_k: Optional[float] = None, resume: Optional[str] = None) -> Dict[str, Any]:
        """
        Train and write the checkpoint, NDJSON log and iteration CSV.

        Returns:
            Dictionary with the outcome, or an "error" entry and its kind
        """
        self.logger.info(f"🤖 Training '{self.cfg.name}' into {self.out_dir}")
        self.logger.info("=" * 60)
        training_logger = TrainingLogger(os.path.join(self.out_dir, "training_log.ndjson"))
        try:
            trainer = self.build_trainer(fixed_k, resume, training_logger)
            outcome = trainer.train()
        except TrainingAborted as e:
            self.logger.error(f"❌ {e}")
            return {"error": str(e), "error_kind": "divergence", "divergences": e.divergences}
        except (ConfigError, CheckpointError, ShapeError, ValueError) as e:
            self.logger.error(f"❌ {e}")
            return {"error": str(e), "error_kind": "config"}
        finally:
            training_logger.save_to_csv(os.path.join(self.out_dir, "training_log.csv"))
            training_logger.close()

        training_logger.print_summary()
        return {
            "checkpoint": outcome.checkpoint_path,
            "iterations_run": outcome.iterations_run,
            "divergences": outcome.divergences,
            "final_k": outcome.final_k,
            "final_loss": outcome.final_loss,
            "summary": training_logger.get_training_summary(),
        }

    def run_evaluation(self, checkpoint_path: Optional[str] = None, trials: Optional[int] = None) -> Dict[str, Any]:
        """Evaluate a checkpoint over independent trials and write the report files."""
        checkpoint_path = checkpoint_path or self.checkpoint_path
        try:
            checkpoint = self.load_compatible(checkpoint_path)
        except CheckpointError as e:
            self.logger.error(f"❌ {e}")
            return {"error": str(e), "error_kind": "config"}

        trials = trials or self.cfg.evaluation.trials
        k = checkpoint.scheduler.get("k", self.cfg.constraint.initial_k)
        costs = self.costs.with_steepness(k)
        seed = self.cfg.trainer.seed + self.cfg.evaluation.seed_offset
        self.logger.info(f"📊 Evaluating {checkpoint_path} over {trials} trials (k {k})")

        report = evaluate(self.model, costs, self.net, checkpoint.params, self.rollout_cfg, trials, seed,
                          self.cfg.evaluation.violation_margin)
        files = self.save_evaluation(report)
        summary = report.summary()
        summary.update({"checkpoint": checkpoint_path, "iteration": checkpoint.iteration, "k": k,
                        "files": files})
        return summary

    def save_evaluation(self, report: EvaluationReport) -> Dict[str, str]:
        files = {
            "summary": os.path.join(self.out_dir, "evaluation_summary.json"),
            "envelope": os.path.join(self.out_dir, "envelope.csv"),
            "terminal_states": os.path.join(self.out_dir, "terminal_states.csv"),
            "trajectories": os.path.join(self.out_dir, "trajectories.npz"),
        }
        _atomic_csv(envelope_frame(report), files["envelope"])
        _atomic_csv(terminal_frame(report), files["terminal_states"])
        _atomic_npz(files["trajectories"], times=report.times, states=report.states, controls=report.controls)
        if report.energy_envelope is not None:
            files["energy_envelope"] = os.path.join(self.out_dir, "energy_envelope.csv")
            energy = pd.DataFrame({"t": report.times, "min": report.energy_envelope["min"],
                                   "max": report.energy_envelope["max"], "mean": report.energy_envelope["mean"]})
            _atomic_csv(energy, files["energy_envelope"])
        write_json_atomic(files["summary"], report.summary())
        self.logger.info(f"💾 Evaluation results saved to: {self.out_dir}")
        return files


def write_penalty_curve(output: str, ks: Sequence[float] = CURVE_KS, grid: Optional[Sequence[float]] = None,
                        c_min: float = CURVE_BOUNDS[0], c_max: float = CURVE_BOUNDS[1],
                        ceiling: float = CURVE_CEILING) -> pd.DataFrame:
    """CSV of (k, x, p) for a scalar constraint on [c_min, c_max]."""
    grid = np.linspace(-4.0, 6.0, 201) if grid is None else np.asarray(grid, dtype=np.float64)
    spec = PenaltySpec(ceiling=ceiling, steepness=float(ks[0]), c_min=np.array([c_min]), c_max=np.array([c_max]),
                       constraint_map=BoxConstraint([0]))
    df = pd.DataFrame(penalty_curve(spec, ks, grid), columns=["k", "x", "p"])
    os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
    _atomic_csv(df, output)
    return df


def describe_checkpoint(path: str) -> Dict[str, Any]:
    """Format tag, iteration, block shapes, trainable count, scheduler and optimizer step."""
    checkpoint = load_checkpoint(path)
    return {
        "format": FORMAT_TAG,
        "iteration": checkpoint.iteration,
        "blocks": {name: list(block.shape) for name, block in checkpoint.params.items()},
        "trainable_count": ValueNetwork.trainable_count(checkpoint.params, checkpoint.params.keys()),
        "scheduler": {k: v for k, v in checkpoint.scheduler.items() if k != "history"},
        "optimizer_step": checkpoint.optimizer.get("step", 0),
    }


def dump_json(document: Dict[str, Any]) -> str:
    return json.dumps(document, ensure_ascii=False, indent=2, default=float)
