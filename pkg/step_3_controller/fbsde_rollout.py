#!/usr/bin/env python3
"""
fbsde_rollout.py
Unrolls the coupled forward (state) and backward (value) SDEs over N Euler
steps for a mini-batch, producing trajectories, terminal values and the loss.

Per step, for every batch member:
    u   = -R^-1 G^T V_x
    u*  = U_max * sig(u)
    y  <- y - h dt + V_x^T (G u* dt + Sigma dw)
    x  <- x + f dt + G u* dt + Sigma dw
    V_x <- LSTM(x)
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional

import numpy as np

from step_1_autodiff import tensor_ad as ad
from step_1_autodiff.tensor_ad import Tape, Tensor
from step_2_model.cost_constraints import (CostBundle, EnergyConstraint, cross_terms, saturated_control_terms,
                                           saturation_cost_terms, state_cost_terms, terminal_cost_terms,
                                           violation_mask)
from step_2_model.dynamics import DynamicsModel, batch_noise, cartpole_energy, euler_update
from step_3_controller.valuenet import THETA_BLOCKS, Params, ValueNetwork

logger = logging.getLogger(__name__)


class RolloutDivergence(FloatingPointError):
    """A state or value left the finite range mid-rollout."""

    def __init__(self, iteration: int, step: int, batch_index: int, quantity: str = "state"):
        self.iteration = iteration
        self.step = step
        self.batch_index = batch_index
        self.quantity = quantity
        super().__init__(f"non-finite {quantity} at iteration {iteration}, step {step}, batch member {batch_index}")


@dataclass(frozen=True, eq=False)
class RolloutConfig:
    steps: int
    dt: float
    batch_size: int
    initial_state: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "initial_state", np.asarray(self.initial_state, dtype=np.float64).ravel())
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be at least 1")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def horizon(self) -> float:
        return self.steps * self.dt


@dataclass
class RolloutResult:
    states: np.ndarray            # M x (N+1) x n
    values: np.ndarray            # M x (N+1)
    controls: np.ndarray          # M x N x m
    terminal_costs: np.ndarray    # M
    state_costs: np.ndarray       # M x N
    saturation_costs: np.ndarray  # M x N
    cross_terms: np.ndarray       # M x N
    hamiltonians: np.ndarray      # M x N
    loss: float
    mean_state_cost: float
    violation_fraction: float
    loss_tensor: Optional[Tensor] = field(default=None, repr=False)


def rollout_noise(model: DynamicsModel, cfg: RolloutConfig, seed: int, iteration: int) -> np.ndarray:
    return batch_noise(seed, cfg.batch_size, cfg.steps, model.noise_dim, cfg.dt, iteration)


def _first_bad_row(values: np.ndarray) -> int:
    bad = np.where(~np.all(np.isfinite(values), axis=1))[0]
    return int(bad[0]) if bad.size else -1


def rollout(model: DynamicsModel, costs: CostBundle, net: ValueNetwork, params: Params, cfg: RolloutConfig,
            noise: np.ndarray, tape: Optional[Tape] = None, weight_decay: float = 0.0,
            iteration: int = 0) -> RolloutResult:
    """
    Forward pass of the FBSDE network for one mini-batch.

    Args:
        model: Dynamics (f, G, Sigma)
        costs: Cost, saturation and penalty specs at the current steepness
        net: Value-gradient network
        params: Parameter blocks (theta and phi)
        cfg: Horizon, step, batch size and initial state
        noise: Brownian increments, shape (M, N, nu)
        tape: Recording tape; None evaluates without recording
        weight_decay: lambda of the L2 term on theta
        iteration: Training iteration, reported on divergence

    Returns:
        RolloutResult; loss_tensor is set when the tape records
    """
    tape = tape if tape is not None else Tape(record=False)
    M, N, n = cfg.batch_size, cfg.steps, model.state_dim
    if noise.shape != (M, N, model.noise_dim):
        raise ValueError(f"noise has shape {noise.shape}, expected {(M, N, model.noise_dim)}")

    bound = net.bind(tape, params)
    X = tape.constant(np.tile(cfg.initial_state, (M, 1)))
    y = net.initial_value(bound) + np.zeros((M, 1))
    vx = bound["vx0"] + np.zeros((M, n))
    H, C = bound["h0"], bound["c0"]

    states = np.empty((M, N + 1, n))
    values = np.empty((M, N + 1))
    controls = np.empty((M, N, model.control_dim))
    state_costs = np.empty((M, N))
    saturation_costs = np.empty((M, N))
    cross = np.empty((M, N))
    hamiltonians = np.empty((M, N))
    states[:, 0] = X.values
    values[:, 0] = y.values[:, 0]

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for step in range(N):
            t = step * cfg.dt
            dW = noise[:, step, :]
            drift = model.drift(X, t)
            control_columns = model.control_columns(X, t)
            diffusion_columns = model.diffusion_columns(X, t)

            _, u_star = saturated_control_terms(costs.cost, costs.saturation, vx, control_columns)
            c = state_cost_terms(costs.cost, costs.penalty, X)
            s = saturation_cost_terms(costs.saturation, u_star)
            coupling = cross_terms(vx, control_columns, u_star)
            h = c + coupling + s

            diffused = diffusion_columns[0] * dW[:, 0:1]
            for k, column in enumerate(diffusion_columns[1:], start=1):
                diffused = diffused + column * dW[:, k:k + 1]
            y = y - h * cfg.dt + (coupling * cfg.dt + ad.row_sum(vx * diffused))
            X = euler_update(X, drift, control_columns, diffusion_columns, u_star, dW, cfg.dt)

            bad_state, bad_value = _first_bad_row(X.values), _first_bad_row(y.values)
            if bad_state >= 0 or bad_value >= 0:
                quantity = "state" if bad_state >= 0 else "value"
                raise RolloutDivergence(iteration, step, bad_state if bad_state >= 0 else bad_value, quantity)

            states[:, step + 1] = X.values
            values[:, step + 1] = y.values[:, 0]
            controls[:, step] = ad.values_of(u_star)
            state_costs[:, step] = ad.values_of(c)[:, 0]
            saturation_costs[:, step] = ad.values_of(s)[:, 0]
            cross[:, step] = ad.values_of(coupling)[:, 0]
            hamiltonians[:, step] = ad.values_of(h)[:, 0]

            if step < N - 1:
                vx, H, C = net.step(bound, X, H, C)

        terminal = terminal_cost_terms(costs.cost, X)
        mismatch = terminal - y
        objective = ad.total(ad.square(mismatch)) * (1.0 / M)
        if weight_decay > 0:
            objective = objective + net.theta_norm_squared(bound) * weight_decay

    loss_value = float(objective.values[0, 0])
    if not np.isfinite(loss_value):
        raise RolloutDivergence(iteration, N, _first_bad_row(mismatch.values), "loss")

    violation = 0.0
    if costs.penalty is not None:
        violation = float(violation_mask(costs.penalty, states.reshape(-1, n)).mean())

    return RolloutResult(
        states=states, values=values, controls=controls,
        terminal_costs=terminal.values[:, 0].copy(),
        state_costs=state_costs, saturation_costs=saturation_costs,
        cross_terms=cross, hamiltonians=hamiltonians,
        loss=loss_value, mean_state_cost=float(state_costs.mean()),
        violation_fraction=violation,
        loss_tensor=objective if tape.record else None,
    )


def loss(result: RolloutResult, params: Optional[Params] = None, weight_decay: float = 0.0,
         theta_names=None) -> float:
    """(1/M) sum (g(x_N) - y_N)^2 + lambda ||theta||^2, recomputed from a result."""
    mismatch = result.terminal_costs - result.values[:, -1]
    value = float(np.mean(mismatch ** 2))
    if weight_decay > 0 and params is not None:
        names = theta_names if theta_names is not None else THETA_BLOCKS
        value += weight_decay * float(sum(np.sum(params[name] ** 2) for name in names))
    return value


@dataclass
class EvaluationReport:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    envelope_min: np.ndarray
    envelope_max: np.ndarray
    envelope_mean: np.ndarray
    violation_fraction: float
    violation_fraction_margin: float
    violation_margin: float
    terminal_mean: np.ndarray
    terminal_std: np.ndarray
    terminal_min: np.ndarray
    terminal_max: np.ndarray
    max_abs_control: float
    energy_envelope: Optional[Dict[str, np.ndarray]] = None

    @property
    def trials(self) -> int:
        return self.states.shape[0]

    def summary(self) -> Dict[str, Any]:
        summary = {
            "trials": self.trials,
            "steps": self.states.shape[1] - 1,
            "violation_fraction": self.violation_fraction,
            "violation_fraction_with_margin": self.violation_fraction_margin,
            "violation_margin": self.violation_margin,
            "terminal_state": {
                "mean": self.terminal_mean.tolist(),
                "std": self.terminal_std.tolist(),
                "min": self.terminal_min.tolist(),
                "max": self.terminal_max.tolist(),
                "mean_abs": np.mean(np.abs(self.states[:, -1]), axis=0).tolist(),
            },
            "max_abs_control": self.max_abs_control,
        }
        if self.energy_envelope is not None:
            summary["energy"] = {
                "max": float(self.energy_envelope["max"].max()),
                "mean_peak": float(self.energy_envelope["per_trial_max"].mean()),
            }
        return summary


def evaluate(model: DynamicsModel, costs: CostBundle, net: ValueNetwork, params: Params, cfg: RolloutConfig,
             trials: int, seed: int, margin: float = 0.0) -> EvaluationReport:
    """
    Run `trials` independent rollouts without recording and summarize them.

    Envelopes are per-timestep min / max / mean over trials for every state
    dimension; the violation fraction is the share of (trial, step) pairs whose
    c_s(x) leaves [c_min, c_max].
    """
    eval_cfg = replace(cfg, batch_size=trials)
    noise = batch_noise(seed, trials, cfg.steps, model.noise_dim, cfg.dt)
    result = rollout(model, costs, net, params, eval_cfg, noise, tape=None)
    states = result.states
    n = states.shape[2]

    violation = margin_violation = 0.0
    energy = None
    if costs.penalty is not None:
        flat = states.reshape(-1, n)
        violation = float(violation_mask(costs.penalty, flat).mean())
        margin_violation = float(violation_mask(costs.penalty, flat, margin).mean())
        if isinstance(costs.penalty.constraint_map, EnergyConstraint):
            per_state = cartpole_energy(flat, costs.penalty.constraint_map.params).reshape(trials, -1)
            energy = {
                "min": per_state.min(axis=0), "max": per_state.max(axis=0), "mean": per_state.mean(axis=0),
                "per_trial_max": per_state.max(axis=1),
            }

    terminal = states[:, -1]
    logger.info(f"📊 Evaluated {trials} trials: violation fraction {violation:.4f}")
    return EvaluationReport(
        times=np.arange(cfg.steps + 1) * cfg.dt,
        states=states, controls=result.controls,
        envelope_min=states.min(axis=0), envelope_max=states.max(axis=0), envelope_mean=states.mean(axis=0),
        violation_fraction=violation, violation_fraction_margin=margin_violation, violation_margin=margin,
        terminal_mean=terminal.mean(axis=0), terminal_std=terminal.std(axis=0),
        terminal_min=terminal.min(axis=0), terminal_max=terminal.max(axis=0),
        max_abs_control=float(np.abs(result.controls).max()),
        energy_envelope=energy,
    )
