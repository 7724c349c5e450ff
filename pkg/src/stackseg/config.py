"""Run configuration: a JSON document with one object per section.

Every field has a default, unknown keys are rejected at any depth, and
``RunConfig.from_dict(cfg.to_dict())`` reproduces ``cfg`` exactly.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentationConfig
from .errors import ConfigError
from .model import PROFILES, ModelConfig
from .train import TrainConfig


@dataclass
class InferConfig:
    window: int | None = None          # None: one tile covering the slice
    overlap: int = 0
    threshold: float = 0.5


@dataclass
class IOConfig:
    train_stacks: list[str] = field(default_factory=list)
    eval_stacks: list[str] = field(default_factory=list)
    format: str | None = None          # "png", "raw" or None to detect
    output_dir: str = "runs/default"
    checkpoint: str | None = None
    resume: bool = False


@dataclass
class SynthConfig:
    kind: str = "drifting-blob"
    depth: int = 24
    height: int = 64
    width: int = 64
    seed: int = 7
    format: str = "png"


@dataclass
class AblateConfig:
    steps: int = 300
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunConfig:
    profile: str = "toy"
    seed: int = 0
    threads: int = 1
    model: dict = field(default_factory=dict)      # overrides on top of the profile
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    io: IOConfig = field(default_factory=IOConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def model_config(self) -> ModelConfig:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        base = PROFILES[self.profile]().to_dict()
        merged = _merge(base, self.model, "model")
        merged["seed"] = self.seed
        try:
            return ModelConfig.from_dict(merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from exc

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def to_dict(self) -> dict:
        # through JSON so tuples become lists and the dict equals its parsed serialization
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = _build(cls, d, "")
        if cfg.profile not in PROFILES:
            raise ConfigError(f"unknown profile {cfg.profile!r}; choose from {sorted(PROFILES)}")
        if cfg.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {cfg.threads}")
        cfg.model_config()          # validate overrides early
        return cfg


_NESTED = {
    "train": TrainConfig, "infer": InferConfig, "io": IOConfig, "synth": SynthConfig,
    "ablate": AblateConfig, "augmentation": AugmentationConfig,
}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where.rstrip('.') or 'config'}: expected an object, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where.rstrip('.') or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in d.items():
        sub = _NESTED.get(key)
        if sub is not None and isinstance(value, dict):
            value = _build(sub, value, f"{where}{key}.")
        elif key == "model" and cls is RunConfig:
            if not isinstance(value, dict):
                raise ConfigError("model: expected an object")
            value = json.loads(json.dumps(value))
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where.rstrip('.') or 'config'}: {exc}") from exc


def _merge(base: dict, over: dict, where: str) -> dict:
    out = dict(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key}: expected an object")
            out[key] = _merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(cfg.to_json() + "\n")
    return path


__all__ = ["RunConfig", "InferConfig", "IOConfig", "SynthConfig", "AblateConfig", "load_config", "save_config"]
