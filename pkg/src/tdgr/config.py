"""Experiment configuration: JSON schema, strict validation, defaults.

Shipped defaults are desk-scale so a full benchmark run finishes on a laptop
CPU; ``PAPER_DEFAULTS`` documents the corresponding full-scale reference
values for every tunable that has one, and any of them can be set explicitly
in the config file. Unknown keys anywhere in the document are rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .methods import METHODS

SCHEMA_VERSION = 1

# Full-scale reference values (documented, not shipped as defaults):
# the desk-scale defaults below keep the same structure with smaller budgets.
PAPER_DEFAULTS = {
    "demos_per_task": 100,
    "trajectory_length": 200,
    "eval_episodes": 100,
    "seeds": [1, 2, 3, 4, 5],
    "policy_epochs": 250,          # 300 for replay methods
    "multitask_epochs": 500,
    "batch_size": 32,
    "learning_rate": 1e-4,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "weight_decay": 0.0,
    "policy_hidden": [512, 512, 512, 512],
    "diffusion_steps": 10_000,
    "diffusion_warmup": 50_000,
    "diffusion_timesteps": 1000,
    "replay_ratio": 0.9,
    "ewc_fisher_multiplier": 100.0,
    "packnet_prune_fraction": 0.75,
    "packnet_retrain_epochs": 125,  # half the training epochs
}


@dataclass
class BenchmarkConfig:
    tasks: int = 5
    demos_per_task: int = 100
    waypoints: int = 4
    trajectory_length: int = 100
    speed: float = 0.03
    noise: float = 0.005
    capture_radius: float = 0.05
    heldout_per_task: int = 20

    def __post_init__(self):
        if self.tasks < 2:
            raise ConfigurationError("benchmark.tasks must be >= 2")
        for name in ("demos_per_task", "waypoints", "trajectory_length"):
            if getattr(self, name) < 2:
                raise ConfigurationError(f"benchmark.{name} must be >= 2")
        if self.heldout_per_task < 0:
            raise ConfigurationError("benchmark.heldout_per_task must be >= 0")


@dataclass
class TrainingConfig:
    policy_epochs: int = 50
    multitask_epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    policy_hidden: list[int] = field(default_factory=lambda: [128, 128, 128])
    diffusion_steps: int = 2000
    diffusion_warmup: int = 5000
    diffusion_timesteps: int = 200
    denoiser_hidden: list[int] = field(default_factory=lambda: [128, 128, 128])
    step_embed_dim: int = 16
    traj_embed_dim: int = 16
    dyn_hidden: list[int] = field(default_factory=lambda: [64, 64])
    replay_ratio: float = 0.9
    ewc_fisher_multiplier: float = 100.0
    packnet_prune_fraction: float = 0.75
    packnet_retrain_epochs: int | None = None
    eval_episodes: int = 100


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    master_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    stream_mode: str = "sequential"
    methods: list[str] = field(default_factory=lambda: ["tdgr"])
    output_dir: str = "runs/experiment"
    workers: int = 1
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"config schema version {self.schema_version}, this build reads {SCHEMA_VERSION}"
            )
        if self.stream_mode not in ("sequential", "blurry"):
            raise ConfigurationError(f"stream_mode {self.stream_mode!r} unknown")
        if not self.seeds:
            raise ConfigurationError("seeds must be a non-empty list")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be distinct")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigurationError(f"unknown method {m!r}; know {METHODS}")
        if not self.methods:
            raise ConfigurationError("methods must be a non-empty list")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    def canonical(self) -> dict:
        """Config as plain data with run-irrelevant fields stripped, for hashing."""
        d = to_dict(self)
        d.pop("output_dir")
        d.pop("workers")
        return d


def to_dict(cfg) -> dict:
    if hasattr(cfg, "__dataclass_fields__"):
        return {k: to_dict(getattr(cfg, k)) for k in cfg.__dataclass_fields__}
    if isinstance(cfg, list):
        return [to_dict(v) for v in cfg]
    return cfg


_SECTION_TYPES = {"benchmark": BenchmarkConfig, "training": TrainingConfig}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"config: section '{path or 'top level'}' must be an object")
    fields = cls.__dataclass_fields__
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigurationError(f"config: unknown key '{where}'")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTION_TYPES.get(name)
        kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name) if sub else value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"config: {e}") from e


def parse_config(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON config file; errors carry line positions."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return parse_config(data)
