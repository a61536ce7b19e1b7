"""Experiment configuration: one structured file maps onto every model, data and run field."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import yaml

from ..policy import PolicyConfig, desk_policy_config
from ..trackformer import TrackformerConfig, desk_config, full_scale_config


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    preset: str = "desk"
    image_size: int = 32
    num_frames: int = 24
    in_count: int = 20
    ood_count: int = 20
    validation_count: int = 4
    mix_ratio: tuple = (9, 2)
    seed: int = 7


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    epochs: int = 100
    min_lr_ratio: float = 0.0
    grad_clip: float = 1.0
    batch_size: int = 32

    def optimizer(self):
        from ..numerics import OptimizerConfig

        return OptimizerConfig(self.lr, self.weight_decay, (0.9, 0.999), 1e-8, self.warmup_epochs, self.epochs,
                               self.min_lr_ratio, self.grad_clip)


@dataclass(frozen=True)
class EvalConfig:
    rollouts_per_seed: int = 20
    max_steps: int = 60
    success_radius: float = 2.0
    seeds: tuple = (0, 1, 2)


def _desk_traj_train():
    return TrainConfig(lr=1e-3, weight_decay=1e-4, warmup_epochs=2, epochs=20, batch_size=32)


def _desk_policy_train():
    return TrainConfig(lr=5e-4, weight_decay=1e-4, warmup_epochs=3, epochs=40, batch_size=16)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    trackformer: TrackformerConfig = field(default_factory=desk_config)
    traj_train: TrainConfig = field(default_factory=_desk_traj_train)
    policy: PolicyConfig = field(default_factory=desk_policy_config)
    policy_train: TrainConfig = field(default_factory=_desk_policy_train)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return _to_plain(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


SECTIONS = {
    "data": DataConfig,
    "trackformer": TrackformerConfig,
    "traj_train": TrainConfig,
    "policy": PolicyConfig,
    "policy_train": TrainConfig,
    "eval": EvalConfig,
}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, raw, where, base=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    values = _to_plain(base) if base is not None else {}
    for key, val in raw.items():
        values[key] = tuple(val) if isinstance(val, list) else val
    values = {k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw):
    """Strictly parse a nested mapping; unknown keys at any level are errors."""
    raw = dict(raw or {})
    top = {"seed", "output_dir", *SECTIONS}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    defaults = ExperimentConfig()
    preset = (raw.get("data") or {}).get("preset", defaults.data.preset)
    base_traj = full_scale_config() if preset == "full" else defaults.trackformer
    sections = {}
    for name, cls in SECTIONS.items():
        base = base_traj if name == "trackformer" else getattr(defaults, name)
        sections[name] = _build(cls, raw.get(name), name, base)
    return ExperimentConfig(seed=int(raw.get("seed", 0)), output_dir=str(raw.get("output_dir", defaults.output_dir)),
                            **sections)


def load_config(path):
    """Read YAML or JSON (JSON is valid YAML) into an :class:`ExperimentConfig`."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw or {})


def override(cfg, section, **changes):
    """Copy of ``cfg`` with fields of one section replaced (validated)."""
    raw = cfg.to_dict()
    if section is None:
        raw.update(changes)
    else:
        raw[section].update(changes)
    return config_from_dict(raw)


def echo_config(cfg, run_dir):
    """Write the fully resolved config next to the run's outputs."""
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, "config.resolved.json")
    with open(path, "w") as fh:
        fh.write(cfg.to_json() + "\n")
    return path
