#!/usr/bin/env python3
"""
cost_constraints.py
Quadratic state cost, the paired-logistic soft state-constraint penalty,
control saturation (sig and its integral cost) and the penalized Hamiltonian.

Functions with a *_terms suffix are batch forms: they take (M x n) state
matrices, return one column per batch member and run on numpy arrays or tape
tensors alike. The remaining functions are single-state conveniences.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from step_1_autodiff import tensor_ad as ad
from step_1_autodiff.tensor_ad import Tape, backward
from step_2_model.dynamics import CartPoleParams, cartpole_energy

logger = logging.getLogger(__name__)

# Saturated controls are kept at most this fraction of U_max, so the
# saturation cost stays finite when sig() rounds to +-1.
SIG_INTERIOR = 1.0 - 1e-12


class SaturationDomainError(ValueError):
    """Raised when a control reaches its saturation limit."""


class BoxConstraint:
    """c_s(x) = selected state components."""

    kind = "box"

    def __init__(self, indices: Sequence[int]):
        self.indices = [int(i) for i in indices]

    def __call__(self, X):
        return X[:, self.indices]

    def __repr__(self) -> str:
        return f"BoxConstraint(indices={self.indices})"


class EnergyConstraint:
    """c_s(x) = total cart-pole energy."""

    kind = "energy"

    def __init__(self, params: CartPoleParams):
        self.params = params

    def __call__(self, X):
        return cartpole_energy(X, self.params)

    def __repr__(self) -> str:
        return "EnergyConstraint()"


@dataclass(frozen=True, eq=False)
class PenaltySpec:
    """
    Constants of the soft constraint penalty.

    ceiling is the plateau L reached far outside [c_min, c_max], steepness is
    the boundary sharpness k, constraint_map is c_s.
    """

    ceiling: float
    steepness: float
    c_min: np.ndarray
    c_max: np.ndarray
    constraint_map: Callable

    def __post_init__(self):
        object.__setattr__(self, "c_min", np.atleast_1d(np.asarray(self.c_min, dtype=np.float64)))
        object.__setattr__(self, "c_max", np.atleast_1d(np.asarray(self.c_max, dtype=np.float64)))
        if self.c_min.shape != self.c_max.shape:
            raise ValueError(f"c_min {self.c_min.shape} and c_max {self.c_max.shape} differ in shape")
        if not np.all(self.c_min < self.c_max):
            raise ValueError("c_min must be below c_max component-wise")
        if self.ceiling < 0:
            raise ValueError(f"ceiling must be non-negative, got {self.ceiling}")
        if not self.steepness > 0:
            raise ValueError(f"steepness must be positive, got {self.steepness}")

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.c_max + self.c_min)

    @property
    def constraint_count(self) -> int:
        return self.c_min.size

    def with_steepness(self, k: float) -> "PenaltySpec":
        return replace(self, steepness=k)


@dataclass(frozen=True, eq=False)
class SaturationSpec:
    u_max: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        u_max = np.atleast_1d(np.asarray(self.u_max, dtype=np.float64))
        weights = np.ones_like(u_max) if self.weights is None else np.atleast_1d(
            np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "u_max", u_max)
        object.__setattr__(self, "weights", weights)
        if weights.shape != u_max.shape:
            raise ValueError("saturation weights and u_max differ in shape")
        if not (np.all(u_max > 0) and np.all(weights > 0)):
            raise ValueError("u_max and saturation weights must be positive")


@dataclass(frozen=True, eq=False)
class CostSpec:
    """q(x) = 1/2 X^T Q X and g(x) = 1/2 X^T Q_f X with X = x - x_target."""

    Q: np.ndarray
    R: np.ndarray
    target: np.ndarray
    Q_terminal: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R", "Q_terminal"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float64).ravel())
        n = self.target.size
        if self.Q.shape != (n, n) or self.Q_terminal.shape != (n, n):
            raise ValueError(f"Q and Q_terminal must be {n}x{n}")
        for name in ("Q", "Q_terminal"):
            matrix = getattr(self, name)
            if not np.allclose(matrix, matrix.T) or np.linalg.eigvalsh(matrix).min() < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semi-definite")
        if not np.allclose(self.R, self.R.T) or np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be symmetric positive definite")

    @property
    def R_inverse(self) -> np.ndarray:
        return np.linalg.inv(self.R)


@dataclass(frozen=True, eq=False)
class CostBundle:
    """Everything the Hamiltonian needs; penalty is None for an unconstrained run."""

    cost: CostSpec
    saturation: SaturationSpec
    penalty: Optional[PenaltySpec] = None

    def with_steepness(self, k: float) -> "CostBundle":
        if self.penalty is None:
            return self
        return replace(self, penalty=self.penalty.with_steepness(k))


def _as_row(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(1, -1)


def penalty_terms(spec: Optional[PenaltySpec], X):
    """
    Soft constraint penalty per batch member, summed over the r constraints.

    Uses 1 - sigmoid(z) = sigmoid(-z) to write the paired-logistic form as
        L sigmoid(k(c - c_max)) + L sigmoid(-k(c - c_min)) - 2 L sigmoid(k(mu - c_max))
    which is algebraically the textbook form and avoids cancelling against L.
    """
    if spec is None or spec.ceiling == 0:
        return np.zeros((X.shape[0], 1))
    c = spec.constraint_map(X)
    k, ceiling = spec.steepness, spec.ceiling
    offset = 2.0 * ceiling * ad.sigmoid(k * (spec.midpoint - spec.c_max))
    upper = ad.sigmoid(k * (c - _as_row(spec.c_max)))
    lower = ad.sigmoid(-k * (c - _as_row(spec.c_min)))
    per_constraint = ceiling * (upper + lower) - _as_row(offset)
    return ad.clip(ad.row_sum(per_constraint), 0.0, np.inf)


def penalty(spec: Optional[PenaltySpec], x: np.ndarray) -> float:
    return float(penalty_terms(spec, _as_row(x))[0, 0])


def penalty_gradient(spec: Optional[PenaltySpec], x: np.ndarray) -> np.ndarray:
    """Exact derivative of the penalty wrt the state, through c_s."""
    tape = Tape()
    state = tape.leaf(_as_row(x), trainable=True, name="x")
    value = penalty_terms(spec, state)
    if not isinstance(value, ad.Tensor):
        return np.zeros(np.size(x))
    return backward(tape, value)[state.node_id].ravel()


def quadratic_terms(weights: np.ndarray, target: np.ndarray, X):
    error = X - _as_row(target)
    return 0.5 * ad.row_sum((error @ weights) * error)


def state_cost_terms(cost: CostSpec, spec: Optional[PenaltySpec], X):
    return quadratic_terms(cost.Q, cost.target, X) + penalty_terms(spec, X)


def state_cost(cost: CostSpec, spec: Optional[PenaltySpec], x: np.ndarray) -> float:
    """1/2 (x - x_target)^T Q (x - x_target) + p(x)."""
    return float(ad.values_of(state_cost_terms(cost, spec, _as_row(x)))[0, 0])


def terminal_cost_terms(cost: CostSpec, X):
    return quadratic_terms(cost.Q_terminal, cost.target, X)


def terminal_cost(cost: CostSpec, x: np.ndarray) -> float:
    return float(terminal_cost_terms(cost, _as_row(x))[0, 0])


def terminal_cost_gradient(cost: CostSpec, x: np.ndarray) -> np.ndarray:
    return cost.Q_terminal @ (np.asarray(x, dtype=np.float64).ravel() - cost.target)


def sig(v):
    """2 / (1 + e^-v) - 1, element-wise; equal to tanh(v / 2)."""
    return 2.0 * ad.sigmoid(v) - 1.0


def saturated_control_terms(cost: CostSpec, saturation: SaturationSpec, vx, control_columns) -> Tuple:
    """
    Pre-saturation argument -R^-1 G^T V_x and the saturated control, per member.

    Returns:
        (u, u_star), both (M x m)
    """
    gradient_projection = ad.concatenate([ad.row_sum(column * vx) for column in control_columns], axis=1)
    u = -(gradient_projection @ cost.R_inverse.T)
    u_star = _as_row(saturation.u_max) * ad.clip(sig(u), -SIG_INTERIOR, SIG_INTERIOR)
    return u, u_star


def saturated_control(vx: np.ndarray, G: np.ndarray, R: np.ndarray, u_max: np.ndarray) -> np.ndarray:
    """u* = U_max * sig(-R^-1 G^T V_x), strictly inside (-U_max, U_max)."""
    u = -np.linalg.solve(np.atleast_2d(R), np.atleast_2d(G).T @ np.asarray(vx, dtype=np.float64).ravel())
    return np.asarray(u_max, dtype=np.float64) * np.clip(sig(u), -SIG_INTERIOR, SIG_INTERIOR)


def saturation_cost_terms(saturation: SaturationSpec, U):
    """c_i U_i [(1+z) ln(1+z) + (1-z) ln(1-z)] summed over channels, z = u_i / U_i."""
    z = U * _as_row(1.0 / saturation.u_max)
    integral = (1.0 + z) * ad.log(1.0 + z) + (1.0 - z) * ad.log(1.0 - z)
    return ad.row_sum(integral * _as_row(saturation.weights * saturation.u_max))


def saturation_cost(saturation: SaturationSpec, u: np.ndarray) -> float:
    """Closed form of sum_i c_i int_0^{u_i} sig^-1(v / U_i) dv."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if np.any(np.abs(u) >= saturation.u_max):
        raise SaturationDomainError(f"control {u.tolist()} is not inside (-{saturation.u_max.tolist()}, "
                                    f"{saturation.u_max.tolist()})")
    return float(saturation_cost_terms(saturation, _as_row(u))[0, 0])


def cross_terms(vx, control_columns, U_star):
    """V_x^T G u* per member."""
    applied = control_columns[0] * U_star[:, 0:1]
    for j, column in enumerate(control_columns[1:], start=1):
        applied = applied + column * U_star[:, j:j + 1]
    return ad.row_sum(vx * applied)


def hamiltonian(cost: CostSpec, spec: Optional[PenaltySpec], saturation: SaturationSpec, x: np.ndarray,
                vx: np.ndarray, G: np.ndarray, u_star: np.ndarray) -> float:
    """h = c(x) + V_x^T G u* + sum_i S_i(u*_i)."""
    cross = float(np.asarray(vx, dtype=np.float64).ravel() @ np.atleast_2d(G) @ np.atleast_1d(u_star))
    return state_cost(cost, spec, x) + cross + saturation_cost(saturation, u_star)


def violation_mask(spec: PenaltySpec, X: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """True for each row of X whose c_s(x) leaves the (margin-relaxed) bounds."""
    c = np.asarray(ad.values_of(spec.constraint_map(np.atleast_2d(X))))
    low = spec.c_min - margin * np.abs(spec.c_min)
    high = spec.c_max + margin * np.abs(spec.c_max)
    return np.any((c < low) | (c > high), axis=1)


def penalty_curve(spec: PenaltySpec, ks: Sequence[float], grid: Sequence[float]) -> np.ndarray:
    """Rows (k, x, p(x)) for a scalar constraint evaluated on a grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("penalty curve grid is empty")
    rows = []
    for k in ks:
        values = penalty_terms(spec.with_steepness(float(k)), grid.reshape(-1, 1))[:, 0]
        rows.append(np.column_stack([np.full_like(grid, float(k)), grid, values]))
    return np.vstack(rows)
