"""Flat key=value experiment configs.

One ``key = value`` per line, ``#`` starts a comment, blank lines are
fine.  Every command declares a schema of typed fields; unknown keys are
rejected so typos fail loudly, and each run writes the fully resolved
config (defaults included) next to its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

__all__ = [
    "ConfigError",
    "Field",
    "REQUIRED",
    "parse_bool",
    "parse_floats",
    "read_config_file",
    "resolve_config",
    "dump_config",
]


class ConfigError(Exception):
    """Bad configuration: unknown key, missing value, unparseable text."""


REQUIRED = object()


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], object]
    default: object = REQUIRED
    help: str = ""


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_floats(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


def read_config_file(path) -> dict:
    """Raw key -> string map from a config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def resolve_config(schema: dict, raw: dict, overrides: dict | None = None) -> dict:
    """Typed values from raw strings, with defaults filled in.

    ``overrides`` (from command-line flags) are applied last, may be
    already-typed values, and can satisfy a required key on their own.
    """
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    given = {k: v for k, v in (overrides or {}).items() if v is not None}
    values: dict = {}
    for key, f in schema.items():
        if key in raw:
            try:
                values[key] = f.parse(raw[key])
            except (ValueError, TypeError) as err:
                raise ConfigError(f"bad value for {key!r}: {raw[key]!r} ({err})") from err
        elif f.default is REQUIRED:
            if key not in given:
                raise ConfigError(f"missing required config key {key!r}")
        else:
            values[key] = f.default
    values.update(given)
    return values


def _canonical(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, (tuple, list)):
        return ",".join(_canonical(v) for v in value)
    return str(value)


def dump_config(path, values: dict) -> None:
    """Write the resolved config, one sorted key per line."""
    lines = [f"{key} = {_canonical(values[key])}" for key in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n")
