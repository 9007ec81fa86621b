#!/usr/bin/env python3
"""
test_experiment_config.py
YAML experiment configs: bundled presets, validation errors with field paths
and line numbers, round trips and the component builders.
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))
sys.path.append(os.path.dirname(__file__))

from experiment_config import (ConfigError, build_costs, build_model, build_network, build_optimizer, build_rollout,
                               build_scheduler, build_train_run, dump_config, load_config, parse_config,
                               with_overrides)
from fbsde_fixtures import TINY_CONFIG_YAML
from step_2_model.cost_constraints import BoxConstraint, EnergyConstraint


def test_presets_load():
    print("🧪 Testing bundled presets")
    task1 = load_config("cartpole_task1")
    assert task1.rollout.steps == 275
    assert task1.constraint.type == "box"
    assert task1.constraint.indices == (0, 2)
    assert task1.network.input_scale == (1.5, np.pi, 2.5, 10.0)

    task2 = load_config("cartpole_task2")
    assert task2.constraint.type == "energy"
    assert task2.constraint.c_max == (5.0,)
    assert task2.trainer.learning_rates == ((1, 0.01), (2000, 0.003), (3500, 0.0009))
    assert task1.trainer.divergence_grad_norm is None
    assert build_train_run(task2).divergence_grad_norm is None


def test_unknown_preset():
    with pytest.raises(ConfigError):
        load_config("cartpole_task9")


def test_dump_and_parse_round_trip(tmp_path):
    cfg = load_config("cartpole_task1")
    path = str(tmp_path / "resolved.yaml")
    dump_config(cfg, path)
    assert load_config(path) == cfg
    assert parse_config(dump_config(parse_config(TINY_CONFIG_YAML))) == parse_config(TINY_CONFIG_YAML)


def test_defaults_fill_missing_sections():
    cfg = parse_config(TINY_CONFIG_YAML)
    assert cfg.name == "tiny"
    assert cfg.rollout.steps == 5
    assert cfg.dynamics.noise_scale == 1.0
    assert cfg.scheduler.beta is None
    assert cfg.evaluation.seed_offset == 1_000_003
    assert cfg.network.input_scale is None


def test_missing_required_field_names_path():
    text = TINY_CONFIG_YAML.replace("  target: [0.0, 3.141592653589793, 0.0, 0.0]\n", "")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == "cost.target"
    assert "required" in str(info.value)


def test_missing_required_section():
    text = TINY_CONFIG_YAML.split("constraint:")[0]
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == "rollout"


def test_wrong_type_reports_line():
    text = TINY_CONFIG_YAML.replace("  dt: 0.01", "  dt: fast")
    expected_line = text.splitlines().index("  dt: fast") + 1
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == "rollout.dt"
    assert info.value.line == expected_line
    assert f"line {expected_line}" in str(info.value)


def test_boolean_is_not_an_integer():
    text = TINY_CONFIG_YAML.replace("  batch_size: 4", "  batch_size: true")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == "rollout.batch_size"


def test_unknown_field_and_section():
    with pytest.raises(ConfigError) as info:
        parse_config(TINY_CONFIG_YAML.replace("  hidden_size: 3", "  hidden_size: 3\n  layers: 2"))
    assert info.value.path == "network.layers"
    with pytest.raises(ConfigError) as info:
        parse_config(TINY_CONFIG_YAML + "plotting:\n  dpi: 300\n")
    assert info.value.path == "plotting"


def test_horizon_must_be_multiple_of_dt():
    with pytest.raises(ConfigError) as info:
        parse_config(TINY_CONFIG_YAML.replace("  horizon: 0.05", "  horizon: 0.055"))
    assert info.value.path == "rollout.horizon"


def test_cross_field_checks():
    with pytest.raises(ConfigError) as info:
        parse_config(TINY_CONFIG_YAML.replace("  indices: [0, 2]", "  indices: [0, 4]"))
    assert info.value.path == "constraint.indices"
    with pytest.raises(ConfigError) as info:
        parse_config(TINY_CONFIG_YAML.replace("  c_max: [1.5, 2.5]", "  c_max: [1.5]"))
    assert info.value.path == "constraint.c_max"
    with pytest.raises(ConfigError) as info:
        parse_config(TINY_CONFIG_YAML.replace("  type: box", "  type: circle"))
    assert info.value.path == "constraint.type"


def test_invalid_yaml():
    with pytest.raises(ConfigError):
        parse_config("cost: [unclosed\n")
    with pytest.raises(ConfigError):
        parse_config("- just\n- a list\n")


def test_overrides_revalidate():
    cfg = parse_config(TINY_CONFIG_YAML)
    changed = with_overrides(cfg, seed=11, iterations=9, trials=3)
    assert changed.trainer.seed == 11
    assert changed.trainer.iterations == 9
    assert changed.evaluation.trials == 3
    assert cfg.trainer.seed == 7
    with pytest.raises(ConfigError):
        with_overrides(cfg, trials=0)


def test_builders():
    cfg = load_config("cartpole_task1")
    model = build_model(cfg)
    costs = build_costs(cfg, model)
    assert isinstance(costs.penalty.constraint_map, BoxConstraint)
    assert costs.penalty.steepness == 1.5
    np.testing.assert_array_equal(costs.cost.Q, np.diag([0.5, 5.0, 0.05, 0.05]))

    net = build_network(cfg, model)
    assert net.spec.hidden_size == 16
    rollout_cfg = build_rollout(cfg)
    assert rollout_cfg.steps == 275 and rollout_cfg.batch_size == 128

    run = build_train_run(cfg)
    assert run.schedule.rate_at(2500) == 0.003
    assert build_optimizer(cfg).beta2 == 0.999

    scheduler = build_scheduler(cfg)
    assert scheduler.k == 1.5 and not scheduler.fixed
    fixed = build_scheduler(cfg, fixed_k=4.0)
    assert fixed.k == 4.0 and fixed.fixed

    energy = build_costs(load_config("cartpole_task2"), model)
    assert isinstance(energy.penalty.constraint_map, EnergyConstraint)


def test_unconstrained_config_has_no_penalty():
    text = TINY_CONFIG_YAML.replace("  type: box\n  indices: [0, 2]\n  c_min: [-1.5, -2.5]\n  c_max: [1.5, 2.5]\n",
                                    "  type: none\n")
    cfg = parse_config(text)
    assert build_costs(cfg, build_model(cfg)).penalty is None


def test_gradient_norm_limit_is_optional():
    tiny = TINY_CONFIG_YAML.replace("  max_consecutive_divergences: 3",
                                    "  max_consecutive_divergences: 3\n  divergence_grad_norm: {}")
    assert parse_config(tiny.format("null")).trainer.divergence_grad_norm is None
    assert build_train_run(parse_config(tiny.format("250.0"))).divergence_grad_norm == 250.0
    with pytest.raises(ConfigError) as info:
        parse_config(tiny.format("-1.0"))
    assert info.value.path == "trainer.divergence_grad_norm"
