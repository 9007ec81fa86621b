#!/usr/bin/env python3
"""
trainer.py
Outer training loop: rollout -> loss -> backward -> clip -> Adam -> schedule,
with checkpointing and restore-on-divergence.
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from step_1_autodiff.tensor_ad import Tape, backward
from step_2_model.cost_constraints import CostBundle
from step_2_model.dynamics import DynamicsModel
from step_3_controller.fbsde_rollout import RolloutConfig, RolloutDivergence, rollout, rollout_noise
from step_3_controller.valuenet import Params, ValueNetwork
from step_4_training.checkpoint import Checkpoint, save_checkpoint
from step_4_training.scheduler import SchedulerState, observe
from training_logger import TrainingLogger

logger = logging.getLogger(__name__)

Grads = Dict[str, np.ndarray]


class NonFiniteGradientError(FloatingPointError):
    """Raised by adam_step when a gradient entry is not finite."""


class GradientExplosion(FloatingPointError):
    def __init__(self, iteration: int, norm: float, limit: float):
        self.iteration = iteration
        self.norm = norm
        super().__init__(f"gradient norm {norm:.4g} exceeds {limit:.4g} at iteration {iteration}")


class TrainingAborted(RuntimeError):
    """Too many consecutive divergent iterations."""

    def __init__(self, iteration: int, divergences: int):
        self.iteration = iteration
        self.divergences = divergences
        super().__init__(f"training aborted at iteration {iteration} after {divergences} consecutive divergences")


@dataclass
class OptimizerState:
    """Adam moments per parameter block plus hyperparameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step,
                "m": dict(self.m), "v": dict(self.v)}

    @classmethod
    def from_dict(cls, data: Dict) -> "OptimizerState":
        return cls(beta1=data["beta1"], beta2=data["beta2"], eps=data["eps"], step=int(data["step"]),
                   m={k: np.array(a) for k, a in data.get("m", {}).items()},
                   v={k: np.array(a) for k, a in data.get("v", {}).items()})


@dataclass(frozen=True)
class LearningRateSchedule:
    """Piecewise-constant rate: (iteration, rate) pairs, each active from its iteration on."""

    milestones: Tuple[Tuple[int, float], ...] = ((1, 1e-2), (2000, 3e-3), (3500, 9e-4))

    def __post_init__(self):
        if not self.milestones:
            raise ValueError("learning-rate schedule is empty")
        iterations = [int(i) for i, _ in self.milestones]
        if iterations != sorted(iterations):
            raise ValueError("learning-rate milestones must be sorted by iteration")
        if any(rate <= 0 for _, rate in self.milestones):
            raise ValueError("learning rates must be positive")

    def rate_at(self, iteration: int) -> float:
        rate = self.milestones[0][1]
        for start, value in self.milestones:
            if iteration >= start:
                rate = value
        return float(rate)


@dataclass(frozen=True)
class TrainRun:
    iterations: int = 5000
    batch_size: int = 128
    weight_decay: float = 1e-5
    clip_threshold: float = 10.0
    checkpoint_every: int = 250
    seed: int = 0
    max_consecutive_divergences: int = 10
    divergence_grad_norm: Optional[float] = None
    schedule: LearningRateSchedule = LearningRateSchedule()

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("iterations, batch_size and checkpoint_every must be positive")
        if self.weight_decay < 0 or not self.clip_threshold > 0:
            raise ValueError("weight_decay must be >= 0 and clip_threshold > 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.divergence_grad_norm is not None and not self.divergence_grad_norm > 0:
            raise ValueError("divergence_grad_norm must be positive when set")


@dataclass
class TrainOutcome:
    checkpoint_path: str
    iterations_run: int
    divergences: int
    final_k: float
    final_loss: Optional[float]


def global_norm(grads: Grads) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def clip_gradients(grads: Grads, threshold: float) -> Grads:
    """Global-norm clipping: scale every block by threshold / ||g|| when ||g|| > threshold."""
    if not threshold > 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {name: g * scale for name, g in grads.items()}


def adam_step(opt: OptimizerState, params: Params, grads: Grads, rate: float) -> Params:
    """
    Bias-corrected Adam update.

    Args:
        opt: Moment buffers and step count, updated in place
        params: Current parameter blocks
        grads: Gradients for the blocks to update
        rate: Learning rate for this step

    Returns:
        Updated parameter blocks (blocks without a gradient are carried over)
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteGradientError("non-finite gradient; Adam step skipped")

    t = opt.step + 1
    updated = dict(params)
    for name, g in grads.items():
        m = opt.beta1 * opt.m.get(name, np.zeros_like(g)) + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v.get(name, np.zeros_like(g)) + (1.0 - opt.beta2) * g * g
        m_hat = m / (1.0 - opt.beta1 ** t)
        v_hat = v / (1.0 - opt.beta2 ** t)
        updated[name] = params[name] - rate * m_hat / (np.sqrt(v_hat) + opt.eps)
        opt.m[name] = m
        opt.v[name] = v
    opt.step = t
    return updated


class Trainer:
    """Single writer of parameters, optimizer state and scheduler state."""

    def __init__(self, model: DynamicsModel, costs: CostBundle, net: ValueNetwork, rollout_cfg: RolloutConfig,
                 run: TrainRun, scheduler: SchedulerState, params: Params, out_dir: str,
                 training_logger: TrainingLogger, optimizer: Optional[OptimizerState] = None,
                 start_iteration: int = 0, meta: Optional[Dict] = None):
        self.model = model
        self.costs = costs
        self.net = net
        self.rollout_cfg = rollout_cfg
        self.run = run
        self.scheduler = scheduler
        self.params = params
        self.optimizer = optimizer if optimizer is not None else OptimizerState()
        self.iteration = start_iteration
        self.out_dir = out_dir
        self.training_logger = training_logger
        self.meta = meta or {}
        self.divergences = 0
        self.last_loss: Optional[float] = None
        self._snapshot = self._capture()

    def _capture(self) -> Tuple[int, Params, OptimizerState, SchedulerState]:
        return (self.iteration, {k: v.copy() for k, v in self.params.items()},
                copy.deepcopy(self.optimizer), self.scheduler)

    def _restore(self) -> int:
        iteration, params, optimizer, scheduler = self._snapshot
        self.params = {k: v.copy() for k, v in params.items()}
        self.optimizer = copy.deepcopy(optimizer)
        self.scheduler = scheduler
        return iteration

    @property
    def checkpoint_path(self) -> str:
        return os.path.join(self.out_dir, "checkpoint.json")

    def save(self) -> str:
        checkpoint = Checkpoint(iteration=self.iteration, params=self.params,
                                optimizer=self.optimizer.to_dict(), scheduler=self.scheduler.to_dict(),
                                meta=self.meta)
        path = save_checkpoint(self.checkpoint_path, checkpoint)
        self._snapshot = self._capture()
        self.training_logger.log_checkpoint(self.iteration, path)
        return path

    def step(self, iteration: int, rate: float) -> Tuple[float, float, float, float]:
        """
        One iteration: rollout, backward, clip, Adam.

        Returns:
            (loss, mean state cost, violation fraction, raw gradient norm)
        """
        tape = Tape()
        noise = rollout_noise(self.model, self.rollout_cfg, self.run.seed, iteration)
        costs = self.costs.with_steepness(self.scheduler.k)
        result = rollout(self.model, costs, self.net, self.params, self.rollout_cfg, noise, tape,
                         self.run.weight_decay, iteration)
        grads = tape.gradients_by_name(backward(tape, result.loss_tensor))
        norm = global_norm(grads)
        if not np.isfinite(norm):
            raise NonFiniteGradientError(f"non-finite gradient norm at iteration {iteration}")
        limit = self.run.divergence_grad_norm
        if limit is not None and norm > limit:
            raise GradientExplosion(iteration, norm, limit)
        self.params = adam_step(self.optimizer, self.params, clip_gradients(grads, self.run.clip_threshold), rate)
        return result.loss, result.mean_state_cost, result.violation_fraction, norm

    def train(self) -> TrainOutcome:
        """Run iterations start+1 .. run.iterations and write the final checkpoint."""
        consecutive = 0
        rate: Optional[float] = None
        start = self.iteration
        logger.info(f"🚀 Training iterations {start + 1}..{self.run.iterations} "
                    f"(batch {self.rollout_cfg.batch_size}, k {self.scheduler.k})")

        for iteration in range(start + 1, self.run.iterations + 1):
            new_rate = self.run.schedule.rate_at(iteration)
            if new_rate != rate:
                self.training_logger.log_lr_change(iteration, rate, new_rate)
                rate = new_rate

            try:
                loss, mean_cost, violation, norm = self.step(iteration, rate)
            except (RolloutDivergence, NonFiniteGradientError, GradientExplosion) as e:
                self.divergences += 1
                consecutive += 1
                restored = self._restore()
                self.training_logger.log_divergence(iteration, str(e), step=getattr(e, "step", None),
                                                    batch_index=getattr(e, "batch_index", None),
                                                    restored_iteration=restored)
                logger.warning(f"⚠️  {e}; restored iteration {restored}")
                self.iteration = iteration
                if consecutive >= self.run.max_consecutive_divergences:
                    raise TrainingAborted(iteration, consecutive) from e
                continue

            consecutive = 0
            self.iteration = iteration
            self.last_loss = loss
            self.scheduler, update = observe(self.scheduler, iteration, mean_cost, violation == 0.0)
            self.training_logger.log_iteration(iteration, loss, mean_cost, violation, self.scheduler.k, rate, norm)
            if update is not None:
                self.training_logger.log_k_update(*update)

            if iteration % self.run.checkpoint_every == 0:
                self.save()

        path = self.save()
        logger.info(f"✅ Training finished at iteration {self.iteration}; final k {self.scheduler.k}")
        return TrainOutcome(checkpoint_path=path, iterations_run=self.iteration - start,
                            divergences=self.divergences, final_k=self.scheduler.k, final_loss=self.last_loss)
