#!/usr/bin/env python3
"""
test_dynamics.py
Cart-pole solved dynamics against the implicit equations of motion, the
Sigma-Gamma factorization, Euler stepping and the noise streams.
"""

import os
import sys

import numpy as np
import pytest
from scipy.integrate import solve_ivp

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from step_1_autodiff.tensor_ad import Tape
from step_2_model.dynamics import (CartPoleModel, CartPoleParams, NonFiniteStateError, batch_noise,
                                   cartpole_control_matrix, cartpole_drift, cartpole_energy, diffusion, euler_step,
                                   noise_stream, simulate)

PARAMS = CartPoleParams()
MODEL = CartPoleModel(PARAMS)


def _accelerations(state, u):
    derivative = cartpole_drift(state, PARAMS) + cartpole_control_matrix(state, PARAMS) @ np.atleast_1d(u)
    return derivative[2], derivative[3]


def test_solved_dynamics_satisfy_implicit_equations():
    """Residual of both equations of motion stays below 1e-10."""
    print("🧪 Testing cart-pole accelerations against the implicit equations")
    rng = np.random.default_rng(1)
    M, m, L, g = PARAMS.cart_mass, PARAMS.pole_mass, PARAMS.pole_length, PARAMS.gravity
    for _ in range(1000):
        state = rng.uniform(-3.0, 3.0, size=4)
        u = rng.uniform(-10, 10)
        _, theta, _, theta_dot = state
        x_ddot, theta_ddot = _accelerations(state, u)
        first = (M + m) * x_ddot + m * L * np.sin(theta) * theta_dot ** 2 - m * L * np.cos(theta) * theta_ddot - u
        second = m * L ** 2 * theta_ddot - m * L * np.cos(theta) * x_ddot - m * g * L * np.sin(theta)
        assert abs(first) < 1e-10
        assert abs(second) < 1e-10


def test_velocity_rows_only():
    state = np.array([0.3, 1.2, -0.4, 2.0])
    drift = cartpole_drift(state, PARAMS)
    assert drift[0] == state[2]
    assert drift[1] == state[3]
    G = cartpole_control_matrix(state, PARAMS)
    assert G.shape == (4, 1)
    assert G[0, 0] == 0.0 and G[1, 0] == 0.0


def test_diffusion_is_discounted_on_velocities():
    sigma = diffusion(np.zeros(4), CartPoleParams(noise_scale=2.0))
    np.testing.assert_array_equal(sigma, np.array([[0.0, 0.0], [0.0, 0.0], [0.5, 0.0], [0.0, 0.5]]))


def test_noise_enters_through_control_range():
    """Sigma Gamma = G at arbitrary states."""
    rng = np.random.default_rng(2)
    for _ in range(20):
        state = rng.normal(size=4) * 2.0
        gamma = MODEL.noise_control_factor(state)
        np.testing.assert_allclose(MODEL.diffusion_matrix(state) @ gamma, MODEL.control_matrix(state), atol=1e-12)


def test_zero_noise_has_no_control_factor():
    with pytest.raises(ValueError):
        CartPoleModel(CartPoleParams(noise_scale=0.0)).noise_control_factor(np.zeros(4))


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        CartPoleParams(cart_mass=0.0)
    with pytest.raises(ValueError):
        CartPoleParams(noise_scale=-1.0)


def test_batch_forms_match_on_tape():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(5, 4))
    tape = Tape()
    tensor_drift = MODEL.drift(tape.leaf(X)).values
    np.testing.assert_allclose(tensor_drift, MODEL.drift(X), rtol=1e-13, atol=1e-14)


def test_euler_step_matches_formula():
    state = np.array([0.1, 0.4, -0.2, 0.7])
    u, dw, dt = np.array([2.0]), np.array([0.03, -0.01]), 0.01
    expected = state + (cartpole_drift(state, PARAMS) + cartpole_control_matrix(state, PARAMS) @ u) * dt \
        + diffusion(state, PARAMS) @ dw
    np.testing.assert_allclose(euler_step(MODEL, state, u, dw, dt), expected, atol=1e-14)


def test_euler_step_rejects_bad_inputs():
    with pytest.raises(ValueError):
        euler_step(MODEL, np.zeros(4), np.zeros(1), np.zeros(2), 0.0)
    with pytest.raises(NonFiniteStateError) as info:
        euler_step(MODEL, np.array([0.0, 0.0, np.inf, 0.0]), np.zeros(1), np.zeros(2), 0.01)
    assert info.value.state.shape == (4,)


def test_overflow_reports_the_stepped_state():
    start = np.array([0.0, 1.0, 0.0, 1e200])
    with pytest.raises(NonFiniteStateError) as info:
        euler_step(MODEL, start, np.zeros(1), np.zeros(2), 0.01)
    assert not np.all(np.isfinite(info.value.state))
    assert np.isfinite(info.value.state[0])
    np.testing.assert_array_equal(info.value.previous_state, start)


def test_downward_rest_is_equilibrium():
    trajectory = simulate(MODEL, np.zeros(4), np.zeros((10, 1)), np.zeros((10, 2)), 0.01)
    assert trajectory.shape == (11, 4)
    np.testing.assert_array_equal(trajectory, np.zeros((11, 4)))


def test_energy_values():
    assert cartpole_energy(np.zeros((1, 4)), PARAMS)[0, 0] == 0.0
    upright = np.array([[0.0, np.pi, 0.0, 0.0]])
    expected = 2 * PARAMS.pole_mass * PARAMS.gravity * PARAMS.pole_length
    assert cartpole_energy(upright, PARAMS)[0, 0] == pytest.approx(expected, abs=1e-15)
    moving = np.array([[0.0, 0.0, 2.0, 0.0]])
    assert cartpole_energy(moving, PARAMS)[0, 0] == pytest.approx(0.5 * PARAMS.cart_mass * 4.0)


def test_energy_local_error_is_second_order():
    """One Euler step against a tight ODE reference: halving dt quarters the energy error."""
    state = np.array([0.2, 1.0, 0.8, 3.0])
    u = np.array([4.0])

    def rhs(_, s):
        return cartpole_drift(s, PARAMS) + cartpole_control_matrix(s, PARAMS) @ u

    def energy_error(dt):
        exact = solve_ivp(rhs, (0.0, dt), state, method="DOP853", rtol=1e-13, atol=1e-13).y[:, -1]
        euler = euler_step(MODEL, state, u, np.zeros(2), dt)
        return abs(cartpole_energy(euler[None, :], PARAMS)[0, 0] - cartpole_energy(exact[None, :], PARAMS)[0, 0])

    ratio = energy_error(0.01) / energy_error(0.005)
    assert 3.0 < ratio < 5.0


def test_noise_statistics():
    dt = 0.01
    noise = batch_noise(seed=3, members=1000, steps=500, dim=2, dt=dt)
    assert noise.shape == (1000, 500, 2)
    assert abs(noise.mean()) < 1e-3
    assert noise.var() == pytest.approx(dt, rel=0.01)


def test_streams_are_uncorrelated():
    def draws(stream_id, iteration=0):
        return noise_stream(11, stream_id, iteration).normal(size=100_000)

    base = draws(0)
    for other in (draws(1), draws(7), draws(0, iteration=1)):
        assert abs(np.corrcoef(base, other)[0, 1]) < 0.01


def test_noise_streams_are_reproducible_and_distinct():
    first = batch_noise(5, 4, 10, 2, 0.01, iteration=3)
    np.testing.assert_array_equal(first, batch_noise(5, 4, 10, 2, 0.01, iteration=3))
    assert not np.array_equal(first, batch_noise(5, 4, 10, 2, 0.01, iteration=4))
    assert not np.array_equal(first[0], first[1])
    member = noise_stream(5, 2, 3).normal(0.0, np.sqrt(0.01), size=(10, 2))
    np.testing.assert_array_equal(first[2], member)


def test_noise_is_reproducible_across_iterations():
    seen = []
    for iteration in range(10):
        block = batch_noise(9, 3, 20, 2, 0.01, iteration=iteration)
        np.testing.assert_array_equal(block, batch_noise(9, 3, 20, 2, 0.01, iteration=iteration))
        assert not any(np.array_equal(block, earlier) for earlier in seen)
        seen.append(block)


def test_noise_stream_rejects_negative_key():
    with pytest.raises(ValueError):
        noise_stream(-1, 0)
