#!/usr/bin/env python3
"""
dynamics.py
Controlled SDE models dx = f dt + G u dt + Sigma dw, the cart-pole instance,
Euler-Maruyama stepping and counter-based Brownian noise streams.

Batch methods take an (M x n) matrix of states, one row per batch member, and
work on plain numpy arrays as well as on tape tensors.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from step_1_autodiff import tensor_ad as ad

logger = logging.getLogger(__name__)

# Disturbances hit the two velocity channels scaled by this factor.
DISTURBANCE_DISCOUNT = 0.25


class NonFiniteStateError(FloatingPointError):
    """Raised when an integration step leaves the finite range."""

    def __init__(self, state: np.ndarray, previous: Optional[np.ndarray] = None,
                 message: str = "non-finite state after Euler step"):
        self.state = np.array(state, dtype=np.float64)
        self.previous_state = None if previous is None else np.array(previous, dtype=np.float64)
        super().__init__(f"{message}: {self.state.ravel().tolist()}")


def euler_update(X, drift, control_columns: Sequence, diffusion_columns: Sequence, U, dW, dt: float):
    """x + f dt + G u dt + Sigma dw, for precomputed f, G columns and Sigma columns."""
    out = X + drift * dt
    for j, column in enumerate(control_columns):
        out = out + column * U[:, j:j + 1] * dt
    for k, column in enumerate(diffusion_columns):
        out = out + column * dW[:, k:k + 1]
    return out


class DynamicsModel(ABC):
    """
    The triple (f, G, Sigma) with its dimensions.

    Subclasses implement the batch forms; the single-state matrix forms and the
    Euler step are derived from them.
    """

    state_dim: int
    control_dim: int
    noise_dim: int

    @abstractmethod
    def drift(self, X, t: float = 0.0):
        """Drift f for each row of X, shape (M x n)."""

    @abstractmethod
    def control_columns(self, X, t: float = 0.0) -> List:
        """The m columns of G, each of shape (M x n)."""

    @abstractmethod
    def diffusion_columns(self, X, t: float = 0.0) -> List:
        """The nu columns of Sigma, each of shape (M x n)."""

    def control_matrix(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        X = np.asarray(x, dtype=np.float64).reshape(1, -1)
        return np.column_stack([ad.values_of(c)[0] for c in self.control_columns(X, t)])

    def diffusion_matrix(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        X = np.asarray(x, dtype=np.float64).reshape(1, -1)
        return np.column_stack([ad.values_of(c)[0] for c in self.diffusion_columns(X, t)])

    def noise_control_factor(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        """Gamma with Sigma Gamma = G, by least squares."""
        gamma, *_ = np.linalg.lstsq(self.diffusion_matrix(x, t), self.control_matrix(x, t), rcond=None)
        return gamma

    def step(self, X, U, dW, dt: float, t: float = 0.0):
        return euler_update(X, self.drift(X, t), self.control_columns(X, t),
                            self.diffusion_columns(X, t), U, dW, dt)


@dataclass(frozen=True)
class CartPoleParams:
    """Cart-pole constants in SI units; the pole is a point mass at its tip."""

    cart_mass: float = 1.0
    pole_mass: float = 0.01
    pole_length: float = 0.5
    gravity: float = 9.81
    noise_scale: float = 1.0

    def __post_init__(self):
        for field_name in ("cart_mass", "pole_mass", "pole_length"):
            if not getattr(self, field_name) > 0:
                raise ValueError(f"{field_name} must be positive, got {getattr(self, field_name)}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be non-negative, got {self.noise_scale}")


class CartPoleModel(DynamicsModel):
    """
    Cart-pole with state [x, theta, x_dot, theta_dot], theta measured from the
    downward position and never wrapped.

    The implicit pair
        (M+m) xdd + m L sin(th) thd^2 - m L cos(th) thdd = u
        m L^2 thdd - m L cos(th) xdd - m g L sin(th) = 0
    is solved in closed form; the mass-matrix determinant M + m sin^2(th) >= M > 0.
    """

    state_dim = 4
    control_dim = 1
    noise_dim = 2

    def __init__(self, params: CartPoleParams = CartPoleParams()):
        self.params = params

    def _sin_cos_denominator(self, X):
        theta = X[:, 1:2]
        s, c = ad.sin(theta), ad.cos(theta)
        denominator = self.params.cart_mass + self.params.pole_mass * s * s
        return s, c, denominator

    def drift(self, X, t: float = 0.0):
        p = self.params
        theta_dot = X[:, 3:4]
        s, c, denominator = self._sin_cos_denominator(X)
        x_ddot = p.pole_mass * s * (p.gravity * c - p.pole_length * theta_dot * theta_dot) / denominator
        theta_ddot = (p.gravity * s + c * x_ddot) / p.pole_length
        return ad.concatenate([X[:, 2:3], theta_dot, x_ddot, theta_ddot], axis=1)

    def control_columns(self, X, t: float = 0.0) -> List:
        _, c, denominator = self._sin_cos_denominator(X)
        zeros = np.zeros((X.shape[0], 1))
        inverse = 1.0 / denominator
        return [ad.concatenate([zeros, zeros, inverse, c * inverse / self.params.pole_length], axis=1)]

    def diffusion_columns(self, X, t: float = 0.0) -> List:
        scale = self.params.noise_scale * DISTURBANCE_DISCOUNT
        rows = X.shape[0]
        return [np.tile([0.0, 0.0, scale, 0.0], (rows, 1)), np.tile([0.0, 0.0, 0.0, scale], (rows, 1))]

    def noise_control_factor(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        # Sigma is diagonal on the velocity rows, so Gamma is an exact division there.
        velocity_block = np.diag(self.diffusion_matrix(x, t)[2:4])
        if np.any(velocity_block == 0):
            raise ValueError("noise_scale is zero; G is not in the range of Sigma")
        return self.control_matrix(x, t)[2:4] / velocity_block[:, None]


def cartpole_energy(X, params: CartPoleParams):
    """Total energy 1/2 M xd^2 + m g L (1 - cos th) + 1/2 m L^2 thd^2, one column."""
    x_dot, theta, theta_dot = X[:, 2:3], X[:, 1:2], X[:, 3:4]
    kinetic_cart = 0.5 * params.cart_mass * x_dot * x_dot
    potential = params.pole_mass * params.gravity * params.pole_length * (1.0 - ad.cos(theta))
    kinetic_pole = 0.5 * params.pole_mass * params.pole_length ** 2 * theta_dot * theta_dot
    return kinetic_cart + potential + kinetic_pole


def cartpole_drift(s: np.ndarray, params: CartPoleParams) -> np.ndarray:
    """[x_dot, theta_dot, x_ddot, theta_ddot] at u = 0 for a single state."""
    return CartPoleModel(params).drift(np.asarray(s, dtype=np.float64).reshape(1, 4))[0]


def cartpole_control_matrix(s: np.ndarray, params: CartPoleParams) -> np.ndarray:
    return CartPoleModel(params).control_matrix(s)


def diffusion(s: np.ndarray, params: CartPoleParams) -> np.ndarray:
    return CartPoleModel(params).diffusion_matrix(s)


def euler_step(model: DynamicsModel, x: np.ndarray, u: np.ndarray, dw: np.ndarray, dt: float,
               t: float = 0.0) -> np.ndarray:
    """
    One Euler-Maruyama step x + f dt + G u dt + Sigma dw.

    Args:
        model: Dynamics providing f, G and Sigma
        x: State vector (n,)
        u: Control vector (m,)
        dw: Brownian increment (nu,), sampled N(0, dt I) upstream
        dt: Step length in seconds

    Returns:
        Next state vector (n,)
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    X = np.asarray(x, dtype=np.float64).reshape(1, -1)
    U = np.asarray(u, dtype=np.float64).reshape(1, -1)
    dW = np.asarray(dw, dtype=np.float64).reshape(1, -1)
    with np.errstate(over="ignore", invalid="ignore"):
        nxt = model.step(X, U, dW, dt, t)[0]
    if not np.all(np.isfinite(nxt)):
        raise NonFiniteStateError(nxt, previous=x)
    return nxt


def simulate(model: DynamicsModel, x0: np.ndarray, controls: np.ndarray, noise: np.ndarray,
             dt: float) -> np.ndarray:
    """Open-loop Euler-Maruyama trajectory, shape (N+1, n)."""
    states = [np.asarray(x0, dtype=np.float64)]
    for n, (u, dw) in enumerate(zip(controls, noise)):
        states.append(euler_step(model, states[-1], u, dw, dt, t=n * dt))
    return np.stack(states)


def noise_stream(seed: int, stream_id: int, iteration: int = 0) -> np.random.Generator:
    """
    Counter-based Philox stream keyed by (seed, stream_id).

    The iteration occupies its own counter word, so every (seed, stream,
    iteration) triple draws from a disjoint block of the sequence.
    """
    if seed < 0 or stream_id < 0 or iteration < 0:
        raise ValueError("seed, stream_id and iteration must be non-negative")
    bit_generator = np.random.Philox(key=[seed, stream_id], counter=[0, iteration, 0, 0])
    return np.random.Generator(bit_generator)


def sample_noise(rng: np.random.Generator, dim: int, dt: float) -> np.ndarray:
    """i.i.d. N(0, dt) Brownian increment of the given dimension."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return rng.normal(0.0, np.sqrt(dt), size=dim)


def batch_noise(seed: int, members: int, steps: int, dim: int, dt: float, iteration: int = 0) -> np.ndarray:
    """Brownian increments of shape (members, steps, dim), one stream per member."""
    noise = np.empty((members, steps, dim))
    for member in range(members):
        rng = noise_stream(seed, member, iteration)
        noise[member] = rng.normal(0.0, np.sqrt(dt), size=(steps, dim))
    return noise
