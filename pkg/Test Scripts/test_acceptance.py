#!/usr/bin/env python3
"""
test_acceptance.py
Full training runs on the cart-pole presets. Each run takes minutes, so the
module only runs with FBSDE_RUN_ACCEPTANCE=1.
"""

import os
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from config import RUN_ACCEPTANCE
from experiment_config import load_config, with_overrides
from experiment_runner import ExperimentRunner
from step_2_model.dynamics import cartpole_energy
from training_logger import read_training_log

pytestmark = pytest.mark.skipif(not RUN_ACCEPTANCE, reason="set FBSDE_RUN_ACCEPTANCE=1 to train the presets")


def _train_and_evaluate(cfg, out_dir, fixed_k=None):
    runner = ExperimentRunner(cfg, str(out_dir))
    training = runner.run_training(fixed_k=fixed_k)
    evaluation = runner.run_evaluation() if "error" not in training else None
    return runner, training, evaluation


def _unconstrained(cfg):
    return replace(cfg, constraint=replace(cfg.constraint, ceiling=0.0))


@pytest.fixture(scope="module")
def task1(tmp_path_factory):
    return _train_and_evaluate(load_config("cartpole_task1"), tmp_path_factory.mktemp("task1"))


@pytest.fixture(scope="module")
def task2(tmp_path_factory):
    return _train_and_evaluate(load_config("cartpole_task2"), tmp_path_factory.mktemp("task2"))


def test_box_constraint_is_satisfied(task1):
    print("🧪 Acceptance: box-constrained swing-up")
    _, training, evaluation = task1
    assert "error" not in training
    assert evaluation["trials"] == 256
    assert evaluation["violation_fraction_with_margin"] <= 0.01


def test_unconstrained_baseline_violates_box(tmp_path):
    _, training, evaluation = _train_and_evaluate(_unconstrained(load_config("cartpole_task1")), tmp_path)
    assert "error" not in training
    assert evaluation["violation_fraction"] >= 0.05


def test_adaptive_schedule_is_stable(task1):
    runner, training, _ = task1
    log = read_training_log(os.path.join(runner.out_dir, "training_log.ndjson"))
    iterations = log[log["event"] == "iteration"]
    assert len(iterations) == runner.cfg.trainer.iterations
    assert np.isfinite(iterations["loss"]).all()
    assert 4.0 <= training["final_k"] <= 8.0


@pytest.mark.xfail(reason="divergence needs an overflow once the gradient-norm limit is off", strict=False)
def test_fixed_steep_wall_diverges_early(tmp_path):
    cfg = with_overrides(load_config("cartpole_task1"), iterations=50)
    runner = ExperimentRunner(cfg, str(tmp_path))
    runner.run_training(fixed_k=6.0)
    log = read_training_log(os.path.join(runner.out_dir, "training_log.ndjson"))
    divergences = log[log["event"] == "divergence"]
    assert len(divergences) >= 1
    assert divergences["iteration"].min() <= 50


def test_energy_stays_under_ceiling(task2):
    _, training, evaluation = task2
    assert "error" not in training
    assert evaluation["energy"]["max"] <= 5.25


def test_unconstrained_energy_exceeds_ceiling(tmp_path):
    runner, training, _ = _train_and_evaluate(_unconstrained(load_config("cartpole_task2")), tmp_path)
    assert "error" not in training
    states = np.load(os.path.join(runner.out_dir, "trajectories.npz"))["states"]
    energy = cartpole_energy(states.reshape(-1, 4), runner.model.params)
    assert energy.max() > 5.0


def test_swing_up_reaches_target(task1):
    _, _, evaluation = task1
    terminal = evaluation["terminal_state"]
    assert abs(terminal["mean"][1] - np.pi) <= 0.25
    assert terminal["mean_abs"][3] <= 1.0
