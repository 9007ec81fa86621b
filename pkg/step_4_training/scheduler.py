#!/usr/bin/env python3
"""
scheduler.py
Adaptive steepness schedule for the soft state-constraint penalty.

Every eta iterations the windowed standard deviation of the mean state cost is
compared with a threshold beta; when it falls below (or every eta' iterations
regardless) the steepness k grows by delta and the auxiliaries move:
    k, delta, beta, gamma = k + delta, delta - delta_accel, gamma * beta, gamma + ratio_accel
followed by delta >= 0 and gamma <= 1. Once the training batch stays inside
the constraint boundary the schedule ends for good.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class SchedulerUpdate(NamedTuple):
    iteration: int
    sigma: float
    beta: float
    old_k: float
    new_k: float


@dataclass(frozen=True)
class SchedulerState:
    """
    k: boundary steepness; delta: its increment; beta: convergence threshold
    (None until the first window sets it); gamma: threshold change ratio;
    ratio_accel / delta_accel: the per-update changes of gamma and delta;
    check_interval / max_interval: eta and eta'.
    """

    k: float
    delta: float = 0.5
    beta: Optional[float] = None
    gamma: float = 0.9
    ratio_accel: float = 0.01
    delta_accel: float = 0.05
    check_interval: int = 50
    max_interval: int = 500
    history: Tuple[float, ...] = field(default_factory=tuple)
    done: bool = False
    fixed: bool = False

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.check_interval < 1 or self.max_interval < 1:
            raise ValueError("check_interval and max_interval must be at least 1")
        if not 0 < self.gamma:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["history"] = list(self.history)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SchedulerState":
        values = dict(data)
        values["history"] = tuple(float(c) for c in values.get("history", ()))
        return cls(**values)


def cost_variance(history: Sequence[float]) -> Tuple[float, float]:
    """Population mean and standard deviation of the buffered state costs."""
    if len(history) == 0:
        raise ValueError("cost history is empty")
    costs = np.asarray(history, dtype=np.float64)
    mean = float(costs.mean())
    return mean, float(np.sqrt(np.mean((costs - mean) ** 2)))


def observe(state: SchedulerState, iteration: int, mean_state_cost: float,
            trajectories_inside: bool) -> Tuple[SchedulerState, Optional[SchedulerUpdate]]:
    """
    Feed one training iteration into the schedule.

    Args:
        state: Current schedule
        iteration: Iteration number l (>= 1, increasing across calls)
        mean_state_cost: Batch-and-time mean of c(x) this iteration
        trajectories_inside: True when no training state violated the bounds

    Returns:
        (next state, the update applied or None)
    """
    if state.done or state.fixed:
        return state, None
    if trajectories_inside:
        logger.info(f"✅ Trajectories inside the constraint boundary at iteration {iteration}; k stays at {state.k}")
        return replace(state, done=True), None

    history = (state.history + (float(mean_state_cost),))[-state.check_interval:]
    k, delta, beta, gamma = state.k, state.delta, state.beta, state.gamma
    update = None

    if iteration % state.check_interval == 0:
        _, sigma = cost_variance(history)
        if beta is None:
            beta = sigma
        if sigma < beta or iteration % state.max_interval == 0:
            threshold = beta
            k, delta, beta, gamma = k + delta, delta - state.delta_accel, gamma * beta, gamma + state.ratio_accel
            update = SchedulerUpdate(iteration, sigma, threshold, state.k, k)
            history = ()

    delta = max(delta, 0.0)
    gamma = min(gamma, 1.0)
    return replace(state, k=k, delta=delta, beta=beta, gamma=gamma, history=history), update
