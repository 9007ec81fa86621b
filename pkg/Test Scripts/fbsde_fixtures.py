#!/usr/bin/env python3
"""
fbsde_fixtures.py
Small experiment setups shared by the test scripts: a few steps, a handful of
batch members and a tiny LSTM, so every rollout runs in milliseconds.
"""

import os
import sys

import numpy as np

# Add path for imports (go up one directory from Test Scripts)
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from step_2_model.cost_constraints import BoxConstraint, CostBundle, CostSpec, PenaltySpec, SaturationSpec
from step_2_model.dynamics import CartPoleModel, CartPoleParams
from step_3_controller.fbsde_rollout import RolloutConfig
from step_3_controller.valuenet import NetworkSpec, ValueNetwork

TARGET = np.array([0.0, np.pi, 0.0, 0.0])

TINY_CONFIG_YAML = """\
name: tiny
cost:
  q_diagonal: [0.5, 5.0, 0.05, 0.05]
  target: [0.0, 3.141592653589793, 0.0, 0.0]
  terminal_diagonal: [5.0, 50.0, 0.5, 0.5]
  r_diagonal: [0.1]
constraint:
  type: box
  indices: [0, 2]
  c_min: [-1.5, -2.5]
  c_max: [1.5, 2.5]
  ceiling: 100.0
  initial_k: 1.5
rollout:
  horizon: 0.05
  dt: 0.01
  initial_state: [0.0, 0.0, 0.0, 0.0]
  batch_size: 4
network:
  hidden_size: 3
  forget_bias: 1.0
trainer:
  iterations: 2
  checkpoint_every: 1
  seed: 7
  max_consecutive_divergences: 3
evaluation:
  trials: 8
"""


def write_tiny_config(directory: str, text: str = TINY_CONFIG_YAML, name: str = "tiny.yaml") -> str:
    path = os.path.join(str(directory), name)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


def box_costs(ceiling: float = 100.0, k: float = 1.5, u_max: float = 10.0) -> CostBundle:
    cost = CostSpec(Q=np.diag([0.5, 5.0, 0.05, 0.05]), R=np.array([[0.1]]), target=TARGET,
                    Q_terminal=np.diag([5.0, 50.0, 0.5, 0.5]))
    penalty = PenaltySpec(ceiling=ceiling, steepness=k, c_min=np.array([-1.5, -2.5]), c_max=np.array([1.5, 2.5]),
                          constraint_map=BoxConstraint([0, 2]))
    return CostBundle(cost=cost, saturation=SaturationSpec(u_max=np.array([u_max])), penalty=penalty)


def tiny_setup(noise_scale: float = 1.0, steps: int = 5, batch_size: int = 4, hidden_size: int = 3,
               initial_state=(0.0, 0.0, 0.0, 0.0), seed: int = 0):
    """(model, costs, net, params, rollout config) with Xavier-initialized parameters."""
    model = CartPoleModel(CartPoleParams(noise_scale=noise_scale))
    net = ValueNetwork(NetworkSpec(state_dim=4, hidden_size=hidden_size, forget_bias=1.0))
    params = net.init_params(np.random.default_rng(seed))
    cfg = RolloutConfig(steps=steps, dt=0.01, batch_size=batch_size, initial_state=np.array(initial_state))
    return model, box_costs(), net, params, cfg


def zero_params(net: ValueNetwork):
    return {name: np.zeros(shape) for name, shape in net.spec.block_shapes().items()}
