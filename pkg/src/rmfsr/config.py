"""Experiment configuration: one YAML file composing every module's config."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .datagen import DegradationSpec
from .dsp import StftConfig
from .flowcore import FlowConfig
from .model import ModelConfig
from .sampler import SamplerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid, unreadable or unknown configuration content."""


SECTIONS = {
    "stft": StftConfig,
    "flow": FlowConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
}


@dataclass
class Paths:
    out_dir: str = "runs/default"
    data_dir: str = "data"


@dataclass
class ExperimentConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    seed: int = 0
    paths: Paths = field(default_factory=Paths)

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d["degradation"] = self.degradation.to_dict()
        d["seed"] = self.seed
        d["paths"] = asdict(self.paths)
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def save(self, path) -> None:
        Path(path).write_text(self.dump())

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("top level of the config must be a mapping")
        known = set(SECTIONS) | {"degradation", "seed", "paths"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        kw = {}
        try:
            for name, typ in list(SECTIONS.items()) + [("paths", Paths)]:
                sec = d.get(name) or {}
                if not isinstance(sec, dict):
                    raise ConfigError(f"section {name!r} must be a mapping")
                valid = {f.name for f in fields(typ)}
                bad = set(sec) - valid
                if bad:
                    raise ConfigError(f"unknown key(s) in {name!r}: {sorted(bad)}")
                kw[name] = typ(**sec)
            kw["degradation"] = DegradationSpec.from_dict(d.get("degradation"))
            kw["seed"] = int(d.get("seed", 0))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**kw)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path, overrides=()) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
        return cls.from_dict(apply_overrides(data or {}, overrides))


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars/lists."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"bad override key {key!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
        node = data
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = nxt
        node[parts[-1]] = value
    return data
