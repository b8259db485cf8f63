"""Run configuration: nested dataclasses loaded from YAML with dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .envs import ENV_REGISTRY, ConfigError


@dataclass
class EnvConfig:
    id: str = ""
    params: dict = field(default_factory=dict)


@dataclass
class TrainConfig:
    policy: str = "tabular"
    M: int = 6
    init_steps: int = 20480
    steps_per_batch: int = 512
    epochs: int = 10
    minibatches: int = 32
    clip: float = 0.2
    gae_lambda: float = 0.95
    lr: float = 3e-3
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True
    buffer_fraction: float = 0.2
    hidden: list = field(default_factory=lambda: [64, 64])


@dataclass
class ExtensionConfig:
    N: int = 6
    K: int = 30
    K_prime: int = 5
    solver: str = "ipo"
    beta: float = 0.9
    t: float = 20.0
    delta: float = 0.01
    threshold_mode: str = "beta"
    selection: str = "crowd"
    fresh_eval: bool = False
    fresh_episodes: int = 32
    slack: float = 0.0
    lr: float | None = 0.1


@dataclass
class MetricsConfig:
    delta: float = 0.5
    eval_episodes: int = 32
    eval_mode: str = "greedy"
    oracle: bool = False


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    extension: ExtensionConfig = field(default_factory=ExtensionConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0
    workers: int = 1
    name: str = "run"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        if not self.env.id:
            raise ConfigError("missing key: env.id")
        if self.env.id not in ENV_REGISTRY:
            raise ConfigError(f"env.id: unknown environment {self.env.id!r}")
        t, x = self.train, self.extension
        for key, v in (("train.M", t.M), ("extension.N", x.N), ("extension.K_prime", x.K_prime),
                       ("train.steps_per_batch", t.steps_per_batch), ("workers", self.workers)):
            if v < 1:
                raise ConfigError(f"{key} must be >= 1, got {v}")
        if x.K < 0 or t.init_steps < 0:
            raise ConfigError("extension.K and train.init_steps must be >= 0")
        if x.K % x.K_prime:
            raise ConfigError(f"extension.K_prime ({x.K_prime}) must divide extension.K ({x.K})")
        if x.solver not in ("ipo", "cpo", "lagrangian"):
            raise ConfigError(f"extension.solver: unknown solver {x.solver!r}")
        if x.threshold_mode not in ("beta", "proposition1"):
            raise ConfigError(f"extension.threshold_mode: unknown mode {x.threshold_mode!r}")
        if x.selection not in ("crowd", "random"):
            raise ConfigError(f"extension.selection: unknown method {x.selection!r}")
        if not 0 < x.beta < 1:
            raise ConfigError("extension.beta must lie in (0, 1)")
        if t.policy not in ("tabular", "mlp"):
            raise ConfigError(f"train.policy: unknown kind {t.policy!r}")
        if self.metrics.eval_mode not in ("greedy", "stochastic"):
            raise ConfigError(f"metrics.eval_mode: unknown mode {self.metrics.eval_mode!r}")
        if not 0 < t.buffer_fraction <= 1:
            raise ConfigError("train.buffer_fraction must lie in (0, 1]")
        return self


_SECTIONS = {"env": EnvConfig, "train": TrainConfig, "extension": ExtensionConfig,
             "metrics": MetricsConfig}


def _build(cls, data: dict, prefix: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(prefix + k for k in sorted(unknown))}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    if "env" not in data:
        raise ConfigError("missing key: env.id")
    kw = {}
    for name, cls in _SECTIONS.items():
        section = data.pop(name, {}) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        kw[name] = _build(cls, section, name + ".")
    cfg = _build(RunConfig, {**data, **kw}, "")
    return cfg


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` (value parsed as YAML) to a nested dict in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for o in overrides:
        apply_override(data, o)
    return config_from_dict(data).validate()
