"""Flat ``key = value`` run configuration merged from a file and command-line overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .model import HacaConfig
from .training import TrainConfig

PRESETS = ("full", "micro", "small")
RUN_KEYS = {"preset": "full", "data": "", "out": "", "resume": ""}


class ConfigError(ValueError):
    pass


def _field_defaults(cls) -> dict[str, object]:
    return {f.name: f.default for f in dataclasses.fields(cls)}


MODEL_KEYS = _field_defaults(HacaConfig)
TRAIN_KEYS = _field_defaults(TrainConfig)
ALL_KEYS = {**RUN_KEYS, **MODEL_KEYS, **TRAIN_KEYS}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def parse_overrides(args: Sequence[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs; dashes in keys become underscores."""
    out: dict[str, str] = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise ConfigError(f"unexpected argument {arg!r}")
        key, sep, value = arg[2:].partition("=")
        if not sep:
            if i + 1 >= len(args):
                raise ConfigError(f"option --{key} needs a value")
            value = args[i + 1]
            i += 1
        out[key.replace("-", "_")] = value
        i += 1
    return out


def coerce(key: str, raw) -> object:
    if key not in ALL_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    default = ALL_KEYS[key]
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


@dataclass
class RunConfig:
    model: HacaConfig
    train: TrainConfig
    run: dict[str, str] = field(default_factory=dict)
    explicit: set[str] = field(default_factory=set)

    def items(self) -> list[tuple[str, object]]:
        merged = {**self.run, **self.model.to_dict(), **self.train.to_dict()}
        return sorted(merged.items())

    def lines(self) -> list[str]:
        return [f"{k} = {v}" for k, v in self.items()]


def load_run_config(path: str | os.PathLike | None = None,
                    overrides: Mapping[str, object] | None = None) -> RunConfig:
    values: dict[str, object] = {}
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    values.update(overrides or {})
    parsed = {k: coerce(k, v) for k, v in values.items()}

    preset = str(parsed.get("preset", "full"))
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")
    run = {k: str(parsed.get(k, d)) for k, d in RUN_KEYS.items()}
    model_kw = {k: v for k, v in parsed.items() if k in MODEL_KEYS}
    train_kw = {k: v for k, v in parsed.items() if k in TRAIN_KEYS}
    try:
        model = {"full": HacaConfig, "micro": HacaConfig.micro,
                 "small": HacaConfig.small}[preset](**model_kw)
        train = TrainConfig(**train_kw)
        train.validate()
        if model.vocab_size:
            model.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(model, train, run, set(parsed))
