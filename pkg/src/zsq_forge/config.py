"""Experiment configuration: nested dataclasses with strict JSON round-tripping."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .alignment import AlignmentConfig
from .finetune import FinetuneConfig
from .promotion import PromotionConfig
from .synthesis import SynthesisConfig


class ConfigError(ValueError):
    """Malformed, unknown or invalid configuration."""


@dataclass
class DataConfig:
    seed: int = 0
    classes: int = 10
    per_class_train: int = 400
    per_class_test: int = 100
    noise: float = 0.15


@dataclass
class TeacherConfig:
    arch: str = "small_cnn"
    width: int = 16
    epochs: int = 12
    lr: float = 0.05
    batch: int = 128
    seed: int = 0
    crop_pad: int = 2


@dataclass
class QuantConfig:
    weight_bits: int = 4
    act_bits: int = 4
    act_decay: float = 0.9


@dataclass
class AblationConfig:
    seeds: int = 3


@dataclass
class AnalysisConfig:
    bins: int = 10
    tail_threshold: float = 0.5


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    out_dir: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self, *sections: str) -> str:
        """Short hash of the named sections (all when none given)."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")


def _build(cls, d: Any, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        hint = hints[key]
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, where)
        else:
            kwargs[key] = _coerce(hint, value, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path or 'config'}: {err}") from err


def _coerce(hint, value, where: str):
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    d = json.loads(json.dumps(d))
    for text in overrides:
        keys, value = parse_override(text)
        node = d
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"override {text!r}: {k!r} is not a config section")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"override {text!r}: unknown key {'.'.join(keys)!r}")
        node[keys[-1]] = value
    return d


def preset_path(name: str) -> Path:
    return Path(str(resources.files("zsq_forge") / "configs" / f"{name}.json"))


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Load a JSON config (a file path or a packaged preset name), apply dot-path overrides."""
    base = ExperimentConfig().to_dict()
    if path:
        p = Path(path)
        if not p.exists() and preset_path(str(path)).exists():
            p = preset_path(str(path))
        try:
            user = json.loads(p.read_text())
        except FileNotFoundError as err:
            raise ConfigError(f"config file {path} not found") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
        ExperimentConfig.from_dict(user)
        base = _merge(base, user)
    return ExperimentConfig.from_dict(apply_overrides(base, overrides or []))


def _merge(base: dict, user: dict) -> dict:
    out = dict(base)
    for k, v in user.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


__all__ = ["AblationConfig", "AlignmentConfig", "AnalysisConfig", "ConfigError", "DataConfig", "ExperimentConfig",
           "FinetuneConfig", "PromotionConfig", "QuantConfig", "SynthesisConfig", "TeacherConfig", "apply_overrides",
           "load_config"]
