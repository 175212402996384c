"""Flat ``key=value`` config files and named encoder presets."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .encoder import PRESETS, EncoderConfig


def parse_kv(text: str, source: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(), str(path))


def format_kv(values: dict) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def write_kv(path, values: dict) -> None:
    Path(path).write_text(format_kv(values))


def _coerce(field: dataclasses.Field, value: str):
    kind = str(field.type)
    if "tuple" in kind:
        return tuple(int(x) for x in value.split(",") if x.strip())
    if kind.startswith("bool"):
        return value.lower() in ("1", "true", "yes", "on")
    if kind.startswith("int"):
        return None if value.lower() == "none" else int(value)
    if kind.startswith("float"):
        return float(value)
    return value


def encoder_config_from_kv(values: dict[str, str]) -> EncoderConfig:
    """Build an :class:`EncoderConfig` from string values, optionally on top
    of ``preset=<name>``."""
    values = dict(values)
    base = PRESETS[values.pop("preset")] if "preset" in values else EncoderConfig()
    fields = {f.name: f for f in dataclasses.fields(EncoderConfig)}
    updates = {}
    for key, value in values.items():
        if key not in fields:
            raise ValueError(f"unknown encoder config key {key!r}")
        updates[key] = _coerce(fields[key], value)
    return dataclasses.replace(base, **updates)


def resolve_encoder_config(spec: str | None) -> EncoderConfig:
    """A preset name or a path to a key=value file."""
    if spec is None:
        return PRESETS["convnext-l-5"]
    if spec in PRESETS:
        return PRESETS[spec]
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"encoder config {spec!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    return encoder_config_from_kv(read_kv(path))


def config_to_kv(cfg: EncoderConfig) -> dict:
    return dataclasses.asdict(cfg)
