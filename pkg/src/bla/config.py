"""Flat ``key = value`` experiment configuration files."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Optional

from .training import ConfigError, ExperimentConfig

_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_HINTS = typing.get_type_hints(ExperimentConfig)
_NONE = ("none", "")


def _base_type(name: str):
    hint = _HINTS[name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    return (args[0] if args else hint), type(None) in typing.get_args(hint)


def parse_value(name: str, text: str):
    """Convert the textual value of field ``name`` to its declared type."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown configuration key {name!r}")
    kind, optional = _base_type(name)
    raw = text.strip()
    if optional and raw.lower() in _NONE:
        return None
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read a config file and apply ``overrides`` (values that are None are skipped)."""
    values = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)) if path else {}
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown configuration key {key!r}")
        if value is not None:
            values[key] = value
    config = ExperimentConfig(**values)
    config.validate()
    return config


def dump_config(config: ExperimentConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in config.to_dict().items())


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")
