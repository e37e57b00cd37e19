"""Flat ``key = value`` text used by run configs and checkpoint headers.

Values are typed by the dataclass field they fill: booleans are
``true``/``false``, ranges are comma separated, ``none`` clears an optional
integer.  ``#`` starts a comment.
"""

from __future__ import annotations

import typing
from dataclasses import fields

from .exceptions import ConfigError


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(text, kind, key=None):
    """Convert ``text`` to the Python type ``kind`` (a field annotation)."""
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if kind is tuple or typing.get_origin(kind) is tuple:
            return tuple(float(part) for part in text.split(","))
        if typing.get_origin(kind) is typing.Union:
            inner = [a for a in typing.get_args(kind) if a is not type(None)][0]
            return None if text.lower() in ("none", "") else parse_value(text, inner, key)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}", key=key) from None
    raise ConfigError(f"unsupported field type for {key}", key=key)


def parse_lines(text, source="<text>"):
    """``{key: raw value}`` from key-value text; duplicate keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key=key)
        out[key] = value
    return out


def dump(*objects):
    """Key-value text for one or more dataclass instances."""
    lines = []
    for obj in objects:
        for f in fields(obj):
            lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_into(cls, raw, exclude=()):
    """Instantiate ``cls`` from the raw entries whose keys are its fields."""
    types = _field_types(cls)
    values = {k: parse_value(v, types[k], k) for k, v in raw.items()
              if k in types and k not in exclude}
    return cls(**values)
