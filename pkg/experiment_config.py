#!/usr/bin/env python3
"""
experiment_config.py
Experiment configuration: a YAML document with one section per component.

- import usage:
    from experiment_config import load_config, dump_config
    cfg = load_config("cartpole_task1")       # bundled preset or a path
    dump_config(cfg, "resolved.yaml")

Every field is type-checked on load; problems raise ConfigError naming the
dotted field path and, when known, the YAML line.
"""

import math
import os
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np
import yaml

from config import PRESET_DIR
from step_2_model.cost_constraints import (BoxConstraint, CostBundle, CostSpec, EnergyConstraint, PenaltySpec,
                                           SaturationSpec)
from step_2_model.dynamics import CartPoleModel, CartPoleParams
from step_3_controller.fbsde_rollout import RolloutConfig
from step_3_controller.valuenet import NetworkSpec, ValueNetwork
from step_4_training.scheduler import SchedulerState
from step_4_training.trainer import LearningRateSchedule, OptimizerState, TrainRun

CONSTRAINT_TYPES = ("none", "box", "energy")


class ConfigError(ValueError):
    """Invalid experiment configuration; carries the field path and YAML line."""

    def __init__(self, path: str, message: str, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = f"{path} (line {line})" if line is not None else path
        super().__init__(f"{location}: {message}")


@dataclass(frozen=True)
class DynamicsSection:
    cart_mass: float = 1.0
    pole_mass: float = 0.01
    pole_length: float = 0.5
    gravity: float = 9.81
    noise_scale: float = 1.0


@dataclass(frozen=True)
class CostSection:
    q_diagonal: Tuple[float, ...]
    target: Tuple[float, ...]
    terminal_diagonal: Tuple[float, ...]
    r_diagonal: Tuple[float, ...] = (0.1,)


@dataclass(frozen=True)
class ConstraintSection:
    type: str = "none"
    indices: Tuple[int, ...] = ()
    c_min: Tuple[float, ...] = ()
    c_max: Tuple[float, ...] = ()
    ceiling: float = 100.0
    initial_k: float = 1.5


@dataclass(frozen=True)
class SaturationSection:
    u_max: Tuple[float, ...] = (10.0,)
    weights: Tuple[float, ...] = (1.0,)


@dataclass(frozen=True)
class RolloutSection:
    horizon: float
    dt: float
    initial_state: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    batch_size: int = 128

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class NetworkSection:
    hidden_size: int = 16
    forget_bias: float = 0.0
    input_scale: Optional[Tuple[float, ...]] = None
    value_scale: float = 1.0


@dataclass(frozen=True)
class TrainerSection:
    iterations: int = 5000
    weight_decay: float = 1e-5
    clip_threshold: float = 10.0
    checkpoint_every: int = 250
    seed: int = 0
    max_consecutive_divergences: int = 10
    divergence_grad_norm: Optional[float] = None
    learning_rates: Tuple[Tuple[int, float], ...] = ((1, 1e-2), (2000, 3e-3), (3500, 9e-4))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class SchedulerSection:
    delta: float = 0.5
    beta: Optional[float] = None
    gamma: float = 0.9
    ratio_accel: float = 0.01
    delta_accel: float = 0.05
    check_interval: int = 50
    max_interval: int = 500


@dataclass(frozen=True)
class EvaluationSection:
    trials: int = 256
    violation_margin: float = 0.02
    seed_offset: int = 1_000_003


SECTIONS = {
    "dynamics": DynamicsSection,
    "cost": CostSection,
    "constraint": ConstraintSection,
    "saturation": SaturationSection,
    "rollout": RolloutSection,
    "network": NetworkSection,
    "trainer": TrainerSection,
    "scheduler": SchedulerSection,
    "evaluation": EvaluationSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    cost: CostSection
    rollout: RolloutSection
    name: str = "experiment"
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    constraint: ConstraintSection = field(default_factory=ConstraintSection)
    saturation: SaturationSection = field(default_factory=SaturationSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    scheduler: SchedulerSection = field(default_factory=SchedulerSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# ---------- YAML line index ----------

def _line_index(node: Optional[yaml.Node], prefix: str = "", index: Optional[Dict[str, int]] = None) -> Dict[str, int]:
    """Map dotted field paths to 1-based YAML line numbers."""
    index = {} if index is None else index
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
            index[path] = key_node.start_mark.line + 1
            _line_index(value_node, path, index)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = f"{prefix}[{i}]"
            index[path] = item.start_mark.line + 1
            _line_index(item, path, index)
    return index


# ---------- coercion ----------

def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(value: Any, hint: Any, path: str, lines: Dict[str, int]) -> Any:
    line = lines.get(path)
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, path, lines)

    if hint is float:
        if not _is_number(value):
            raise ConfigError(path, f"expected a number, got {value!r}", line)
        if not math.isfinite(float(value)):
            raise ConfigError(path, f"must be finite, got {value!r}", line)
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}", line)
        return int(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}", line)
        return value

    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}", line)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]", lines) for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} entries, got {len(value)}", line)
        return tuple(_coerce(v, a, f"{path}[{i}]", lines) for i, (v, a) in enumerate(zip(value, args)))

    raise ConfigError(path, f"unsupported field type {hint}", line)


def _section(cls, data: Any, name: str, lines: Dict[str, int]):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(name, "expected a mapping", lines.get(name))

    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field", lines.get(f"{name}.{key}"))

    values = {}
    for f in fields(cls):
        path = f"{name}.{f.name}"
        if f.name not in data:
            if f.default is MISSING and f.default_factory is MISSING:
                raise ConfigError(path, "required field is missing", lines.get(name))
            continue
        values[f.name] = _coerce(data[f.name], hints[f.name], path, lines)
    return cls(**values)


# ---------- validation ----------

def _check(condition: bool, path: str, message: str, lines: Dict[str, int]) -> None:
    if not condition:
        raise ConfigError(path, message, lines.get(path))


def validate(cfg: ExperimentConfig, lines: Optional[Dict[str, int]] = None) -> ExperimentConfig:
    """Range and cross-field checks; returns the config unchanged when valid."""
    lines = lines or {}
    n, m = CartPoleModel.state_dim, CartPoleModel.control_dim

    d = cfg.dynamics
    for name in ("cart_mass", "pole_mass", "pole_length", "gravity"):
        _check(getattr(d, name) > 0, f"dynamics.{name}", "must be positive", lines)
    _check(d.noise_scale >= 0, "dynamics.noise_scale", "must be non-negative", lines)

    c = cfg.cost
    _check(len(c.q_diagonal) == n, "cost.q_diagonal", f"needs {n} entries", lines)
    _check(len(c.target) == n, "cost.target", f"needs {n} entries", lines)
    _check(len(c.terminal_diagonal) == n, "cost.terminal_diagonal", f"needs {n} entries", lines)
    _check(len(c.r_diagonal) == m, "cost.r_diagonal", f"needs {m} entries", lines)
    _check(all(q >= 0 for q in c.q_diagonal), "cost.q_diagonal", "entries must be non-negative", lines)
    _check(all(q >= 0 for q in c.terminal_diagonal), "cost.terminal_diagonal", "entries must be non-negative", lines)
    _check(all(r > 0 for r in c.r_diagonal), "cost.r_diagonal", "entries must be positive", lines)

    k = cfg.constraint
    _check(k.type in CONSTRAINT_TYPES, "constraint.type", f"must be one of {', '.join(CONSTRAINT_TYPES)}", lines)
    if k.type != "none":
        expected = len(k.indices) if k.type == "box" else 1
        if k.type == "box":
            _check(len(k.indices) > 0, "constraint.indices", "box constraint needs state indices", lines)
            _check(all(0 <= i < n for i in k.indices), "constraint.indices", f"indices must lie in [0, {n})", lines)
        _check(len(k.c_min) == expected, "constraint.c_min", f"needs {expected} entries", lines)
        _check(len(k.c_max) == expected, "constraint.c_max", f"needs {expected} entries", lines)
        _check(all(lo < hi for lo, hi in zip(k.c_min, k.c_max)), "constraint.c_max",
               "each bound must exceed its c_min", lines)
    _check(k.ceiling >= 0, "constraint.ceiling", "must be non-negative", lines)
    _check(k.initial_k > 0, "constraint.initial_k", "must be positive", lines)

    s = cfg.saturation
    _check(len(s.u_max) == m and all(u > 0 for u in s.u_max), "saturation.u_max", f"needs {m} positive entries", lines)
    _check(len(s.weights) == m and all(w > 0 for w in s.weights), "saturation.weights",
           f"needs {m} positive entries", lines)

    r = cfg.rollout
    _check(r.dt > 0, "rollout.dt", "must be positive", lines)
    _check(r.horizon > 0, "rollout.horizon", "must be positive", lines)
    _check(r.steps >= 1 and abs(r.steps * r.dt - r.horizon) <= 1e-9 * max(1.0, r.horizon), "rollout.horizon",
           "must be an integer multiple of dt", lines)
    _check(len(r.initial_state) == n, "rollout.initial_state", f"needs {n} entries", lines)
    _check(r.batch_size >= 1, "rollout.batch_size", "must be at least 1", lines)

    net = cfg.network
    _check(net.hidden_size >= 1, "network.hidden_size", "must be at least 1", lines)
    if net.input_scale is not None:
        _check(len(net.input_scale) == n and all(v > 0 for v in net.input_scale), "network.input_scale",
               f"needs {n} positive entries", lines)

    t = cfg.trainer
    for name in ("iterations", "checkpoint_every", "max_consecutive_divergences"):
        _check(getattr(t, name) >= 1, f"trainer.{name}", "must be at least 1", lines)
    _check(t.weight_decay >= 0, "trainer.weight_decay", "must be non-negative", lines)
    _check(t.clip_threshold > 0, "trainer.clip_threshold", "must be positive", lines)
    _check(t.divergence_grad_norm is None or t.divergence_grad_norm > 0, "trainer.divergence_grad_norm",
           "must be positive or null", lines)
    _check(t.seed >= 0, "trainer.seed", "must be non-negative", lines)
    _check(len(t.learning_rates) > 0, "trainer.learning_rates", "needs at least one (iteration, rate) pair", lines)
    starts = [i for i, _ in t.learning_rates]
    _check(starts == sorted(starts), "trainer.learning_rates", "must be sorted by iteration", lines)
    _check(all(rate > 0 for _, rate in t.learning_rates), "trainer.learning_rates", "rates must be positive", lines)
    _check(0 <= t.beta1 < 1 and 0 <= t.beta2 < 1, "trainer.beta1", "Adam betas must lie in [0, 1)", lines)
    _check(t.eps > 0, "trainer.eps", "must be positive", lines)

    sc = cfg.scheduler
    _check(sc.delta >= 0, "scheduler.delta", "must be non-negative", lines)
    _check(sc.beta is None or sc.beta > 0, "scheduler.beta", "must be positive or null", lines)
    _check(0 < sc.gamma <= 1, "scheduler.gamma", "must lie in (0, 1]", lines)
    _check(sc.check_interval >= 1, "scheduler.check_interval", "must be at least 1", lines)
    _check(sc.max_interval >= 1, "scheduler.max_interval", "must be at least 1", lines)

    e = cfg.evaluation
    _check(e.trials >= 1, "evaluation.trials", "must be at least 1", lines)
    _check(e.violation_margin >= 0, "evaluation.violation_margin", "must be non-negative", lines)
    _check(e.seed_offset >= 0, "evaluation.seed_offset", "must be non-negative", lines)
    return cfg


# ---------- load / dump ----------

def resolve_config_path(name_or_path: str) -> str:
    """A file path, or the name of a bundled preset such as 'cartpole_task1'."""
    if os.path.isfile(name_or_path):
        return name_or_path
    preset = os.path.join(PRESET_DIR, f"{name_or_path}.yaml")
    if os.path.isfile(preset):
        return preset
    raise ConfigError("config", f"no config file or preset named '{name_or_path}'")


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
        lines = _line_index(yaml.compose(text))
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError("config", f"invalid YAML: {e}", mark.line + 1 if mark else None) from e

    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    for key in data:
        if key != "name" and key not in SECTIONS:
            raise ConfigError(str(key), "unknown section", lines.get(str(key)))

    values: Dict[str, Any] = {}
    if "name" in data:
        values["name"] = _coerce(data["name"], str, "name", lines)
    for name, cls in SECTIONS.items():
        if name in data:
            values[name] = _section(cls, data[name], name, lines)
        elif name in ("cost", "rollout"):
            raise ConfigError(name, "required section is missing")
    try:
        cfg = ExperimentConfig(**values)
    except ValueError as e:
        raise ConfigError("config", str(e)) from e
    return validate(cfg, lines)


def load_config(name_or_path: str) -> ExperimentConfig:
    path = resolve_config_path(name_or_path)
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def dump_config(cfg: ExperimentConfig, path: Optional[str] = None) -> str:
    """Serialize to YAML; written atomically when a path is given."""
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
    if path:
        tmp_path = path + ".tmp"
        with open(tmp_path, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp_path, path)
    return text


def with_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, iterations: Optional[int] = None,
                   trials: Optional[int] = None) -> ExperimentConfig:
    """Apply command-line overrides and re-validate."""
    trainer = cfg.trainer
    if seed is not None:
        trainer = replace(trainer, seed=seed)
    if iterations is not None:
        trainer = replace(trainer, iterations=iterations)
    evaluation = cfg.evaluation if trials is None else replace(cfg.evaluation, trials=trials)
    return validate(replace(cfg, trainer=trainer, evaluation=evaluation))


# ---------- builders ----------

def build_model(cfg: ExperimentConfig) -> CartPoleModel:
    d = cfg.dynamics
    return CartPoleModel(CartPoleParams(cart_mass=d.cart_mass, pole_mass=d.pole_mass, pole_length=d.pole_length,
                                        gravity=d.gravity, noise_scale=d.noise_scale))


def build_costs(cfg: ExperimentConfig, model: CartPoleModel) -> CostBundle:
    c, k = cfg.cost, cfg.constraint
    cost = CostSpec(Q=np.diag(c.q_diagonal), R=np.diag(c.r_diagonal), target=np.array(c.target),
                    Q_terminal=np.diag(c.terminal_diagonal))
    saturation = SaturationSpec(u_max=np.array(cfg.saturation.u_max), weights=np.array(cfg.saturation.weights))
    penalty = None
    if k.type != "none":
        constraint_map = BoxConstraint(k.indices) if k.type == "box" else EnergyConstraint(model.params)
        penalty = PenaltySpec(ceiling=k.ceiling, steepness=k.initial_k, c_min=np.array(k.c_min),
                              c_max=np.array(k.c_max), constraint_map=constraint_map)
    return CostBundle(cost=cost, saturation=saturation, penalty=penalty)


def build_network(cfg: ExperimentConfig, model: CartPoleModel) -> ValueNetwork:
    net = cfg.network
    scale = None if net.input_scale is None else np.array(net.input_scale)
    return ValueNetwork(NetworkSpec(state_dim=model.state_dim, hidden_size=net.hidden_size,
                                    forget_bias=net.forget_bias, input_scale=scale, value_scale=net.value_scale))


def build_rollout(cfg: ExperimentConfig) -> RolloutConfig:
    r = cfg.rollout
    return RolloutConfig(steps=r.steps, dt=r.dt, batch_size=r.batch_size, initial_state=np.array(r.initial_state))


def build_scheduler(cfg: ExperimentConfig, fixed_k: Optional[float] = None) -> SchedulerState:
    sc = cfg.scheduler
    return SchedulerState(k=fixed_k if fixed_k is not None else cfg.constraint.initial_k, delta=sc.delta,
                          beta=sc.beta, gamma=sc.gamma, ratio_accel=sc.ratio_accel, delta_accel=sc.delta_accel,
                          check_interval=sc.check_interval, max_interval=sc.max_interval,
                          fixed=fixed_k is not None)


def build_train_run(cfg: ExperimentConfig) -> TrainRun:
    t = cfg.trainer
    return TrainRun(iterations=t.iterations, batch_size=cfg.rollout.batch_size, weight_decay=t.weight_decay,
                    clip_threshold=t.clip_threshold, checkpoint_every=t.checkpoint_every, seed=t.seed,
                    max_consecutive_divergences=t.max_consecutive_divergences,
                    divergence_grad_norm=t.divergence_grad_norm,
                    schedule=LearningRateSchedule(tuple((int(i), float(r)) for i, r in t.learning_rates)))


def build_optimizer(cfg: ExperimentConfig) -> OptimizerState:
    t = cfg.trainer
    return OptimizerState(beta1=t.beta1, beta2=t.beta2, eps=t.eps)
