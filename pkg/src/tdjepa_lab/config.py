"""Run configuration: one JSON document with a section per subsystem.

Every field has a default, so ``{}`` is a valid config. Unknown sections or
fields, wrong types and JSON syntax errors raise ``ConfigError`` with the
offending location.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .agent import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class TheoryConfig:
    """Random instances for the closed-form, bound and gradient checks."""

    n_instances: int = 20
    min_states: int = 6
    max_states: int = 12
    dims: list = field(default_factory=lambda: [2, 3])
    max_latents: int = 3
    gammas: list = field(default_factory=lambda: [0.5, 0.9])
    symmetric: bool = True
    n_random: int = 5
    n_rewards: int = 200
    n_fd_instances: int = 5


@dataclass
class DynamicsConfig:
    n_states: int = 10
    dim: int = 3
    n_latents: int = 2
    gamma: float = 0.9
    horizon: float = 5.0
    step: float = 1e-3
    fine_step: float = 5e-4
    record_every: int = 10
    drift_tol: float = 1e-4
    ratio_range: list = field(default_factory=lambda: [12.0, 20.0])
    lyapunov_step: float = 1e-2
    lyapunov_tol: float = 1e-8
    lyapunov_kernels: list = field(default_factory=lambda: ["successor-measure", "one-step"])


@dataclass
class EnvConfig:
    width: int = 5
    height: int = 5
    ascii_map: str | None = None
    slip: float = 0.1
    gamma: float = 0.95
    n_transitions: int = 100_000
    dataset_mode: str = "iid-uniform"
    rollout_len: int = 100


@dataclass
class EvalConfig:
    goals: list | None = None  # None: map goals, else corners and centre
    episodes: int = 20
    horizon: int = 200
    min_value_ratio: float = 0.70
    min_uniform_multiple: float = 2.0
    min_cov_eig: float = 0.1


@dataclass
class SweepConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    reg: list = field(default_factory=lambda: [1.0])
    tau: list = field(default_factory=lambda: [0.05])


@dataclass
class RunConfig:
    seed: int = 0
    tolerance_scale: float = 1.0
    theory: TheoryConfig = field(default_factory=TheoryConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_type(value, annotation, where: str):
    ann = str(annotation)
    if ann.startswith("int") and not (isinstance(value, int) and not isinstance(value, bool)):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if ann.startswith("float") and not (isinstance(value, (int, float)) and not isinstance(value, bool)):
        if not (value is None and "None" in ann):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
    if ann == "bool" and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if ann.startswith("str") and not isinstance(value, str) and not (value is None and "None" in ann):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    if ann.startswith("list") and not isinstance(value, list) and not (value is None and "None" in ann):
        raise ConfigError(f"{where}: expected a list, got {value!r}")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        loc = f"{where}.{key}" if where else key
        if key not in fields:
            raise ConfigError(f"{loc}: unknown field (known: {', '.join(sorted(fields))})")
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, loc)
        else:
            _check_type(value, fields[key].type, loc)
            kwargs[key] = float(value) if str(fields[key].type).startswith("float") and value is not None else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
