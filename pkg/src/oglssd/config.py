"""YAML run configuration with ``section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path
from typing import Any, Sequence

import yaml

from .errors import ArtifactIOError, ConfigError
from .guidance import SteeringConfig
from .losses import LossConfig
from .trainer import DataConfig, ModelConfig, TrainConfig, WarmupConfig, config_hash, config_to_dict  # noqa: F401

_NESTED = {
    "steering": SteeringConfig,
    "loss": LossConfig,
    "model": ModelConfig,
    "warmup": WarmupConfig,
    "data": DataConfig,
}


def _coerce(cls, name: str, value: Any):
    hint = typing.get_type_hints(cls)[name]
    origin = typing.get_origin(hint)
    if origin is tuple:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        inner = typing.get_args(hint)[0]
        return tuple(inner(v) for v in value)
    if value is None:
        return None
    args = typing.get_args(hint)
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    if base is bool and isinstance(value, str):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{cls.__name__}.{name}: expected a boolean, got {value!r}")
    if base in (int, float, str):
        try:
            out = base(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{cls.__name__}.{name}: cannot read {value!r} as {base.__name__}") from exc
        if base is int and isinstance(value, float) and value != out:
            raise ConfigError(f"{cls.__name__}.{name}: expected an integer, got {value!r}")
        return out
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}; valid keys: {sorted(fields)}")
    kwargs = {}
    for k, v in data.items():
        if cls is TrainConfig and k in _NESTED:
            kwargs[k] = _build(_NESTED[k], v or {}, f"{where}.{k}")
        else:
            kwargs[k] = _coerce(cls, k, v)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> TrainConfig:
    cfg = _build(TrainConfig, data, "config")
    cfg.validate()
    return cfg


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b=value`` strings (values parsed as YAML scalars)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = yaml.safe_load(raw) if raw else ""
    return data


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> TrainConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ArtifactIOError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return config_from_dict(apply_overrides(data, overrides))


def dump_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True), encoding="utf-8")
