#!/usr/bin/env python3
"""
valuenet.py
LSTM value-gradient network: one shared cell plus a dense head mapping the
hidden state to V_x, and the trainable initial quantities (y0, V_x0, H0, C0).

Parameters are plain dicts of float64 matrices. Input weights are stored as
(inputs x hidden) so a batch of row states multiplies from the left.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from step_1_autodiff import tensor_ad as ad
from step_1_autodiff.tensor_ad import Tape, Tensor

logger = logging.getLogger(__name__)

GATES = ("i", "f", "o", "c")
THETA_BLOCKS = tuple(f"W_{g}" for g in GATES) + tuple(f"U_{g}" for g in GATES) + \
    tuple(f"b_{g}" for g in GATES) + ("W_out", "b_out")
PHI_BLOCKS = ("y0", "vx0", "h0", "c0")

Params = Dict[str, np.ndarray]


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    state_dim: int
    hidden_size: int = 16
    forget_bias: float = 0.0
    input_scale: Optional[np.ndarray] = None
    value_scale: float = 1.0

    def __post_init__(self):
        if self.state_dim < 1 or self.hidden_size < 1:
            raise ValueError("state_dim and hidden_size must be at least 1")
        scale = np.ones(self.state_dim) if self.input_scale is None else np.asarray(self.input_scale, dtype=np.float64)
        if scale.shape != (self.state_dim,) or np.any(scale <= 0):
            raise ValueError(f"input_scale must hold {self.state_dim} positive entries")
        object.__setattr__(self, "input_scale", scale)

    def block_shapes(self) -> Dict[str, Tuple[int, int]]:
        n, h = self.state_dim, self.hidden_size
        shapes = {}
        for g in GATES:
            shapes[f"W_{g}"] = (n, h)
            shapes[f"U_{g}"] = (h, h)
            shapes[f"b_{g}"] = (1, h)
        shapes.update({"W_out": (h, n), "b_out": (1, n), "y0": (1, 1), "vx0": (1, n), "h0": (1, h), "c0": (1, h)})
        return shapes


def xavier_init(shape: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Xavier normal: N(0, 2 / (fan_in + fan_out))."""
    fan_in, fan_out = shape
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan-in and fan-out must be at least 1, got {shape}")
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> Params:
    """Xavier weights, zero biases (forget gate at spec.forget_bias), zero initial values."""
    params: Params = {}
    for name, shape in spec.block_shapes().items():
        if name.startswith(("W_", "U_")):
            params[name] = xavier_init(shape, rng)
        else:
            params[name] = np.zeros(shape)
    params["b_f"] = np.full((1, spec.hidden_size), float(spec.forget_bias))
    return params


def lstm_step(params, x, H, C, input_scale: Optional[np.ndarray] = None):
    """
    One LSTM cell step followed by the dense head.

    Args:
        params: Parameter blocks as numpy arrays or tape tensors
        x: Batch of states (M x n)
        H: Hidden state (M x h) or a broadcastable (1 x h) row
        C: Cell state, same layout as H
        input_scale: Fixed per-dimension divisor applied to x

    Returns:
        (V_x prediction, H', C')
    """
    if input_scale is not None:
        x = x * (1.0 / np.asarray(input_scale, dtype=np.float64)).reshape(1, -1)

    def gate(g: str):
        return x @ params[f"W_{g}"] + H @ params[f"U_{g}"] + params[f"b_{g}"]

    input_gate = ad.sigmoid(gate("i"))
    forget_gate = ad.sigmoid(gate("f"))
    output_gate = ad.sigmoid(gate("o"))
    candidate = ad.tanh(gate("c"))
    C_next = forget_gate * C + input_gate * candidate
    H_next = output_gate * ad.tanh(C_next)
    prediction = H_next @ params["W_out"] + params["b_out"]
    return prediction, H_next, C_next


class ValueNetwork:
    """Binds parameter blocks to a tape and evaluates the shared cell."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec

    def init_params(self, rng: np.random.Generator) -> Params:
        return init_params(self.spec, rng)

    def bind(self, tape: Tape, params: Params) -> Dict[str, Tensor]:
        """One leaf per block; every unrolled step references these same leaves."""
        return {name: tape.leaf(params[name], trainable=True, name=name) for name in params}

    def step(self, bound, x, H, C):
        return lstm_step(bound, x, H, C, self.spec.input_scale)

    def initial_value(self, bound):
        return bound["y0"] * self.spec.value_scale

    @staticmethod
    def theta_norm_squared(bound):
        """||theta||^2 over network weights and biases; phi is excluded."""
        norm = ad.total(ad.square(bound[THETA_BLOCKS[0]]))
        for name in THETA_BLOCKS[1:]:
            norm = norm + ad.total(ad.square(bound[name]))
        return norm

    @staticmethod
    def trainable_count(params: Params, names: Iterable[str] = THETA_BLOCKS + PHI_BLOCKS) -> int:
        return int(sum(params[name].size for name in names))

    def check_compatible(self, params: Params) -> None:
        expected = self.spec.block_shapes()
        for name, shape in expected.items():
            if name not in params:
                raise ValueError(f"parameter block '{name}' is missing")
            if params[name].shape != shape:
                raise ValueError(f"parameter block '{name}' has shape {params[name].shape}, expected {shape}")
