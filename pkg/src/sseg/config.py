"""Flat ``key = value`` config files mapped onto (nested) dataclasses.

Nested dataclass fields are addressed with dotted keys, e.g. ``model.embed_dim = 64``.
Unknown keys are rejected; values are parsed according to the field's annotation.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .errors import ConfigError, ParseError


def _is_dataclass_type(tp):
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _hints(cls):
    return typing.get_type_hints(cls)


def parse_value(text: str, tp):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        non_none = [a for a in args if a is not type(None)]
        if text.lower() in ("none", "null", ""):
            return None
        return parse_value(text, non_none[0])
    if tp is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    if tp is tuple or origin is tuple:
        inner = args[0] if args else int
        parts = [p for p in text.strip("()[] ").split(",") if p.strip()]
        return tuple(parse_value(p, inner) for p in parts)
    raise ConfigError(f"unsupported config type {tp!r}")


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def flatten(obj, prefix="") -> dict[str, object]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def set_key(obj, key: str, raw: str):
    """Return a copy of ``obj`` with dotted ``key`` set from the string ``raw``."""
    head, _, rest = key.partition(".")
    names = {f.name for f in dataclasses.fields(obj)}
    if head not in names:
        raise ConfigError(f"unknown config key {key!r}")
    hints = _hints(type(obj))
    tp = hints[head]
    if rest:
        if not _is_dataclass_type(tp):
            raise ConfigError(f"unknown config key {key!r}")
        return dataclasses.replace(obj, **{head: set_key(getattr(obj, head), rest, raw)})
    if _is_dataclass_type(tp):
        raise ConfigError(f"config key {key!r} names a section, not a value")
    try:
        value = parse_value(raw, tp)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None
    return dataclasses.replace(obj, **{head: value})


def parse_text(text: str) -> list[tuple[str, str]]:
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", line=lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ParseError("empty key", line=lineno)
        items.append((key, value.strip()))
    return items


def load_config(path, base):
    obj = base
    for key, raw in parse_text(Path(path).read_text(encoding="utf-8")):
        obj = set_key(obj, key, raw)
    return obj


def apply_overrides(obj, overrides: dict[str, str]):
    for key, raw in overrides.items():
        obj = set_key(obj, key, raw)
    return obj


def dump_config(obj) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(flatten(obj).items()))


def save_config(obj, path):
    Path(path).write_text(dump_config(obj), encoding="utf-8")
