"""Experiment configuration: nested dataclasses loaded from JSON, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .datagen import GenConfig
from .encoder import EncoderConfig
from .evaluation import EvalConfig
from .federation import FedConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            value = data[f.name]
            if isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    clients: tuple[str, ...] = ()
    gen: dict | None = None

    def gen_config(self) -> GenConfig | None:
        return None if self.gen is None else _build(GenConfig, self.gen, "data.gen")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        sections = {"data": DataConfig, "encoder": EncoderConfig, "train": TrainConfig,
                    "fed": FedConfig, "eval": EvalConfig}
        unknown = sorted(set(d) - set(sections))
        if unknown:
            raise ConfigError(f"unknown section(s) {unknown}")
        cfg = cls(**{name: _build(kind, d.get(name), name) for name, kind in sections.items()})
        cfg.data.gen_config()
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["data"]["clients"] = list(self.data.clients)
        return out

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


def parse_json(text: str, source: str = "<config>") -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def load_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_json(text, path)


def load_experiment(path: str | None) -> ExperimentConfig:
    return ExperimentConfig() if path is None else ExperimentConfig.from_dict(load_json(path))


def load_gen(path: str | None) -> GenConfig:
    return GenConfig() if path is None else _build(GenConfig, load_json(path), path)


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
