"""Flat ``key = value`` text files (``#`` comments) mapped onto dataclasses."""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def parse_kv(text: str) -> dict[str, tuple[int, str]]:
    """Raw values keyed by name, each with its line number."""
    out: dict[str, tuple[int, str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = (lineno, raw)
    return out


def _convert(raw: str, typ: str):
    optional = "None" in typ
    if optional and raw.lower() in ("none", "null", ""):
        return None
    base = typ.replace("| None", "").strip()
    if base == "bool":
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if base == "int":
        return int(raw)
    if base == "float":
        return float(raw)
    if base == "str":
        return raw
    if base == "tuple[str, ...]":
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if base.startswith("tuple[tuple[float"):
        return tuple(tuple(float(c) for c in trip.split(",")) for trip in raw.split(";") if trip.strip())
    raise ValueError(f"unsupported field type {typ}")


def load_into(cls, text: str, overrides: dict | None = None):
    """Build ``cls`` from file text; unknown keys are errors."""
    types = {f.name: str(f.type) for f in fields(cls)}
    values = {}
    for key, (lineno, raw) in parse_kv(text).items():
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(raw, types[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {key}: {exc}") from None
    values.update(overrides or {})
    return cls(**values)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(",".join(repr(float(c)) for c in t) for t in v)
        return ",".join(str(s) for s in v)
    return str(v)


def dump(obj) -> str:
    return "".join(f"{f.name} = {_format(getattr(obj, f.name))}\n" for f in fields(obj))


def read(cls, path, overrides: dict | None = None):
    return load_into(cls, Path(path).read_text(encoding="utf-8"), overrides)
