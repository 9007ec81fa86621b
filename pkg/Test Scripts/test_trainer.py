#!/usr/bin/env python3
"""
test_trainer.py
Adam, gradient clipping, the learning-rate schedule and the training loop:
determinism, weight decay, bit-exact resume and divergence handling.
"""

import os
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))
sys.path.append(os.path.dirname(__file__))

from experiment_config import (build_costs, build_model, build_network, build_optimizer, build_rollout, build_scheduler,
                               build_train_run, load_config, with_overrides)
from fbsde_fixtures import tiny_setup
from step_3_controller.fbsde_rollout import RolloutDivergence
from step_3_controller.valuenet import THETA_BLOCKS
from step_4_training.checkpoint import load_checkpoint
from step_4_training.scheduler import SchedulerState
from step_4_training.trainer import (LearningRateSchedule, NonFiniteGradientError, OptimizerState, Trainer,
                                     TrainingAborted, TrainRun, adam_step, clip_gradients, global_norm)
from training_logger import TrainingLogger


def _trainer(out_dir, run, scheduler=None, params=None, optimizer=None, start_iteration=0, cls=Trainer):
    model, costs, net, initial, cfg = tiny_setup(seed=2)
    return cls(model, costs, net, cfg, run, scheduler or SchedulerState(k=1.5),
               params if params is not None else initial, str(out_dir), TrainingLogger(echo_every=0),
               optimizer=optimizer, start_iteration=start_iteration)


def _theta_norm(params):
    return float(sum(np.sum(params[name] ** 2) for name in THETA_BLOCKS))


def test_adam_zero_gradient_leaves_params():
    print("🧪 Testing Adam update rules")
    params = {"w": np.array([[1.0, -2.0]])}
    updated = adam_step(OptimizerState(), params, {"w": np.zeros((1, 2))}, 0.1)
    np.testing.assert_array_equal(updated["w"], params["w"])


def test_adam_first_step_moves_by_rate():
    params = {"w": np.array([[1.0, -2.0, 0.5]])}
    opt = OptimizerState()
    updated = adam_step(opt, params, {"w": np.array([[3.0, -0.2, 40.0]])}, 0.01)
    np.testing.assert_allclose(updated["w"] - params["w"], [[-0.01, 0.01, -0.01]], rtol=1e-6)
    assert opt.step == 1
    assert set(opt.m) == {"w"}


def test_adam_converges_on_quadratic_bowl():
    target = np.array([[3.0, -1.0, 0.25]])
    params = {"w": np.zeros((1, 3))}
    opt = OptimizerState()
    for _ in range(2000):
        params = adam_step(opt, params, {"w": 2.0 * (params["w"] - target)}, 0.01)
    np.testing.assert_allclose(params["w"], target, atol=0.05)


def test_adam_rejects_non_finite_gradient():
    opt = OptimizerState()
    with pytest.raises(NonFiniteGradientError):
        adam_step(opt, {"w": np.ones((1, 1))}, {"w": np.array([[np.nan]])}, 0.01)
    assert opt.step == 0


def test_blocks_without_gradient_are_carried_over():
    params = {"a": np.ones((1, 1)), "b": np.ones((2, 2))}
    updated = adam_step(OptimizerState(), params, {"a": np.ones((1, 1))}, 0.1)
    assert updated["b"] is params["b"]


def test_clip_gradients():
    grads = {"a": np.array([[3.0]]), "b": np.array([[4.0]])}
    assert global_norm(grads) == 5.0
    assert clip_gradients(grads, 10.0) is grads
    clipped = clip_gradients(grads, 1.0)
    assert global_norm(clipped) == pytest.approx(1.0)
    np.testing.assert_allclose(clipped["a"], [[0.6]])
    with pytest.raises(ValueError):
        clip_gradients(grads, 0.0)


def test_learning_rate_schedule():
    schedule = LearningRateSchedule()
    assert schedule.rate_at(1) == 1e-2
    assert schedule.rate_at(1999) == 1e-2
    assert schedule.rate_at(2000) == 3e-3
    assert schedule.rate_at(3499) == 3e-3
    assert schedule.rate_at(5000) == 9e-4
    with pytest.raises(ValueError):
        LearningRateSchedule(milestones=())
    with pytest.raises(ValueError):
        LearningRateSchedule(milestones=((10, 1e-3), (1, 1e-2)))
    with pytest.raises(ValueError):
        LearningRateSchedule(milestones=((1, 0.0),))


def test_optimizer_state_round_trip():
    opt = OptimizerState(step=4, m={"w": np.ones((1, 2))}, v={"w": np.full((1, 2), 0.5)})
    restored = OptimizerState.from_dict(opt.to_dict())
    assert restored.step == 4
    np.testing.assert_array_equal(restored.v["w"], opt.v["w"])


def test_invalid_train_run():
    with pytest.raises(ValueError):
        TrainRun(iterations=0)
    with pytest.raises(ValueError):
        TrainRun(clip_threshold=0.0)
    with pytest.raises(ValueError):
        TrainRun(seed=-1)
    with pytest.raises(ValueError):
        TrainRun(divergence_grad_norm=0.0)
    assert TrainRun().divergence_grad_norm is None


def test_training_is_deterministic(tmp_path):
    run = TrainRun(iterations=10, batch_size=4, checkpoint_every=100, seed=5)
    first = _trainer(tmp_path / "a", run)
    second = _trainer(tmp_path / "b", run)
    first.train()
    second.train()
    for name in first.params:
        np.testing.assert_array_equal(first.params[name], second.params[name])
    losses = first.training_logger.iterations()["loss"].tolist()
    assert losses == second.training_logger.iterations()["loss"].tolist()


def test_training_writes_checkpoints_and_records(tmp_path):
    run = TrainRun(iterations=4, batch_size=4, checkpoint_every=2, seed=1)
    trainer = _trainer(tmp_path, run)
    outcome = trainer.train()
    assert outcome.iterations_run == 4
    assert outcome.divergences == 0
    assert os.path.exists(outcome.checkpoint_path)
    assert load_checkpoint(outcome.checkpoint_path).iteration == 4
    log = trainer.training_logger
    assert log.count("iteration") == 4
    assert log.count("checkpoint") == 3
    assert log.count("lr_change") == 1
    assert outcome.final_loss == log.iterations()["loss"].iloc[-1]


def test_strong_weight_decay_shrinks_weights(tmp_path):
    run = TrainRun(iterations=100, batch_size=4, weight_decay=1e3, checkpoint_every=1000, seed=2)
    trainer = _trainer(tmp_path, run)
    before = _theta_norm(trainer.params)
    trainer.train()
    assert _theta_norm(trainer.params) < 0.5 * before


def test_resume_is_bit_exact(tmp_path):
    full = _trainer(tmp_path / "full", TrainRun(iterations=6, batch_size=4, checkpoint_every=100, seed=4))
    full.train()

    first_half = _trainer(tmp_path / "half", TrainRun(iterations=3, batch_size=4, checkpoint_every=100, seed=4))
    checkpoint = load_checkpoint(first_half.train().checkpoint_path)
    resumed = _trainer(tmp_path / "half", TrainRun(iterations=6, batch_size=4, checkpoint_every=100, seed=4),
                       scheduler=SchedulerState.from_dict(checkpoint.scheduler), params=checkpoint.params,
                       optimizer=OptimizerState.from_dict(checkpoint.optimizer),
                       start_iteration=checkpoint.iteration)
    outcome = resumed.train()

    assert outcome.iterations_run == 3
    assert resumed.optimizer.step == full.optimizer.step == 6
    for name in full.params:
        np.testing.assert_array_equal(resumed.params[name], full.params[name])
    assert resumed.scheduler == full.scheduler


class _FailsOnce(Trainer):
    def step(self, iteration, rate):
        if iteration == 2:
            raise RolloutDivergence(iteration, 1, 0)
        return super().step(iteration, rate)


class _AlwaysFails(Trainer):
    def step(self, iteration, rate):
        raise RolloutDivergence(iteration, 0, 2, "value")


def test_single_divergence_restores_last_checkpoint(tmp_path):
    trainer = _trainer(tmp_path, TrainRun(iterations=3, batch_size=4, checkpoint_every=1, seed=3), cls=_FailsOnce)
    outcome = trainer.train()
    assert outcome.divergences == 1
    divergence = [r for r in trainer.training_logger.records if r["kind"] == "divergence"][0]
    assert divergence["iteration"] == 2
    assert divergence["restored_iteration"] == 1
    assert divergence["step"] == 1
    assert trainer.training_logger.count("iteration") == 2


def test_repeated_divergence_aborts(tmp_path):
    trainer = _trainer(tmp_path, TrainRun(iterations=10, batch_size=4, max_consecutive_divergences=3),
                       cls=_AlwaysFails)
    initial = {name: value.copy() for name, value in trainer.params.items()}
    with pytest.raises(TrainingAborted) as info:
        trainer.train()
    assert info.value.iteration == 3
    assert info.value.divergences == 3
    for name in initial:
        np.testing.assert_array_equal(trainer.params[name], initial[name])


def test_gradient_explosion_counts_as_divergence(tmp_path):
    run = TrainRun(iterations=10, batch_size=4, max_consecutive_divergences=2, divergence_grad_norm=1e-12)
    trainer = _trainer(tmp_path, run)
    with pytest.raises(TrainingAborted):
        trainer.train()
    assert trainer.training_logger.count("divergence") == 2
    assert trainer.optimizer.step == 0


def test_fixed_steepness_stays_constant(tmp_path):
    trainer = _trainer(tmp_path, TrainRun(iterations=5, batch_size=4, checkpoint_every=100),
                       scheduler=SchedulerState(k=2.0, check_interval=1, max_interval=1, fixed=True))
    trainer.train()
    assert set(trainer.training_logger.iterations()["k"]) == {2.0}
    assert trainer.training_logger.count("k_update") == 0


def test_steepness_never_decreases(tmp_path):
    scheduler = SchedulerState(k=1.5, check_interval=1, max_interval=1)
    trainer = _trainer(tmp_path, TrainRun(iterations=6, batch_size=4, checkpoint_every=100), scheduler=scheduler)
    trainer.train()
    ks = trainer.training_logger.iterations()["k"].tolist()
    assert all(b >= a for a, b in zip(ks, ks[1:]))


@pytest.mark.parametrize("preset", ["cartpole_task1", "cartpole_task2"])
def test_preset_scale_training_does_not_diverge(tmp_path, preset):
    print(f"🧪 Training {preset} at full network and cost scale")
    cfg = with_overrides(load_config(preset), iterations=3)
    model = build_model(cfg)
    net = build_network(cfg, model)
    rollout_cfg = replace(build_rollout(cfg), batch_size=16)
    trainer = Trainer(model, build_costs(cfg, model), net, rollout_cfg, build_train_run(cfg), build_scheduler(cfg),
                      net.init_params(np.random.default_rng(cfg.trainer.seed)), str(tmp_path),
                      TrainingLogger(echo_every=0), optimizer=build_optimizer(cfg))
    outcome = trainer.train()

    assert outcome.divergences == 0
    assert outcome.iterations_run == 3
    iterations = trainer.training_logger.iterations()
    assert np.isfinite(iterations["loss"]).all()
    assert np.isfinite(iterations["grad_norm"]).all()
    assert set(iterations["k"]) == {1.5}
