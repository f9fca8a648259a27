"""Flat key-value config files.

Format: one ``key = value`` pair per line; lines whose first non-blank
character is ``#`` are comments (no inline comments, so values may contain
``#``, e.g. hex colors); blank lines ignored. Keys are dotted paths; values
are plain strings and typed by the consumer. This one format backs
experiment configs, dataset manifests and run manifests so everything stays
diffable.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path


def parse_kv_text(text: str, origin: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"{origin}:{lineno}: empty key in {raw!r}")
        if key in out:
            raise ValueError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv_text(path.read_text(), origin=str(path))


def format_kv(mapping: dict[str, str]) -> str:
    lines = []
    for key, value in mapping.items():
        value = str(value)
        if "\n" in value:
            raise ValueError(f"value for {key!r} cannot contain newlines")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_kv(path, mapping: dict[str, str]) -> None:
    Path(path).write_text(format_kv(mapping))


def get_typed(kv: dict[str, str], key: str, cast, default=None):
    """Fetch ``key`` and convert with ``cast``; ``default`` when absent."""
    if key not in kv:
        if default is not None:
            return default
        raise KeyError(f"missing config key {key!r}")
    raw = kv[key]
    try:
        if cast is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from exc


def dataclass_to_kv(obj, prefix: str) -> dict[str, str]:
    """Flatten a fully-defaulted config dataclass into ``prefix.field``
    keys. Floats use repr so values round-trip bit-for-bit; tuples join
    with commas."""
    out: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}.{f.name}"
        if isinstance(value, tuple):
            out[key] = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            out[key] = repr(value)
        else:
            out[key] = str(value)
    return out


def dataclass_from_kv(cls, kv: dict[str, str], prefix: str):
    """Inverse of ``dataclass_to_kv``. Field and tuple-element types are
    taken from the class defaults; absent keys keep their default."""
    kwargs = {}
    defaults = cls()
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}"
        if key not in kv:
            continue
        raw = kv[key]
        default = getattr(defaults, f.name)
        try:
            if isinstance(default, tuple):
                parts = [p.strip() for p in raw.split(",") if p.strip()]
                elem = default[0]
                if isinstance(elem, float):
                    kwargs[f.name] = tuple(float(p) for p in parts)
                elif isinstance(elem, int):
                    kwargs[f.name] = tuple(int(p) for p in parts)
                else:
                    kwargs[f.name] = tuple(parts)
            elif isinstance(default, bool):
                kwargs[f.name] = get_typed({key: raw}, key, bool)
            elif isinstance(default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(default, float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from exc
    return cls(**kwargs)


def known_keys(cls, prefix: str) -> set[str]:
    return {f"{prefix}.{f.name}" for f in dataclasses.fields(cls)}
