"""Flat key=value configuration namespace.

All tunables live in one flat namespace shared by every module. Values come
from three layers with increasing precedence: built-in dataclass defaults,
a plain-text config file (``key=value`` lines, ``#`` comments), and CLI
overrides. Each config dataclass picks its own fields out of the merged
mapping; keys claimed by no dataclass are a configuration error.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError


def parse_kv_text(text: str, origin: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        values[key] = value.strip()
    return values


def read_kv_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_kv_text(text, origin=str(path))


def parse_kv_pairs(pairs: list[str]) -> dict[str, str]:
    values: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        if not key:
            raise ConfigError(f"empty key in override {pair!r}")
        values[key.strip()] = value.strip()
    return values


def _coerce(key: str, raw: str, target_type: type):
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"field {key}: {exc}") from exc
    raise ConfigError(f"field {key}: unsupported config type {target_type!r}")


def build_config(cls, values: dict[str, str], claimed: set[str] | None = None):
    """Instantiate a config dataclass from the flat namespace.

    Picks out keys matching the dataclass field names, coercing strings to
    the annotated types. Marks consumed keys in ``claimed`` so the caller
    can reject leftovers.
    """
    kwargs = {}
    for field in dataclasses.fields(cls):
        if field.name in values:
            kwargs[field.name] = _coerce(field.name, values[field.name], _field_type(cls, field))
            if claimed is not None:
                claimed.add(field.name)
    return cls(**kwargs)


def _field_type(cls, field: dataclasses.Field) -> type:
    # Annotations are strings under `from __future__ import annotations`.
    annotation = field.type
    if isinstance(annotation, str):
        return {"int": int, "float": float, "str": str, "bool": bool}.get(annotation, str)
    return annotation


def reject_unknown(values: dict[str, str], claimed: set[str]) -> None:
    unknown = sorted(set(values) - claimed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
