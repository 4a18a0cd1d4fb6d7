"""Flat ``key = value`` config files for :class:`TrainConfig`.

Blank lines and ``#`` comments are ignored. Keys are ``TrainConfig`` field
names; values are parsed by the field's type.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .trainer import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = f"{path}:{line}: " if path is not None and line is not None else (
            f"{path}: " if path is not None else "")
        super().__init__(where + message)
        self.path, self.line = path, line


def _field_types():
    types = {}
    for f in dataclasses.fields(TrainConfig):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        types[f.name] = t
    return types


def _convert(raw: str, kind: str):
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        value = float(raw)
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError(f"expected a finite number, got {raw!r}")
        return value
    return raw


def parse_config(text: str, path=None) -> dict:
    """Parse config text into a ``{field: value}`` dict (unset fields omitted)."""
    types = _field_types()
    out, seen = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", path, lineno)
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown key {key!r}", path, lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})",
                              path, lineno)
        if not raw:
            raise ConfigError(f"missing value for {key!r}", path, lineno)
        try:
            out[key] = _convert(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", path, lineno) from None
        seen[key] = lineno
    return out


def load_config(path, base: TrainConfig | None = None, **overrides) -> TrainConfig:
    """Read ``path`` (``None`` for defaults) on top of ``base``; keyword
    overrides win. Raises :class:`ConfigError` on any problem."""
    values = base.to_dict() if base is not None else {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", p) from None
        values.update(parse_config(text, p))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from None


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n"
                   for k, v in config.to_dict().items())
