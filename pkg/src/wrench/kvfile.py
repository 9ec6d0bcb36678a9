"""Flat ``key = value`` text files.

Used for workload specs, run manifests, scenario definitions and CLI config
files. Blank lines and lines starting with ``#`` are ignored; keys are
case-sensitive; later duplicates override earlier ones.
"""

from __future__ import annotations

import os
from typing import Dict, Mapping


class KVError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise KVError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise KVError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv(path: str | os.PathLike) -> Dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), source=str(path))


def format_kv(items: Mapping[str, object], header: str | None = None) -> str:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for key, value in items.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_kv(path: str | os.PathLike, items: Mapping[str, object], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_kv(items, header))


def as_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise KVError(f"not a boolean: {value!r}")
