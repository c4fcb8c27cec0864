"""Flat ``key = value`` config files (a TOML subset without tables).

Values are Python/TOML literals: numbers, quoted strings, ``true``/``false``
and flat lists. Anything else is taken as a bare string.
"""

from __future__ import annotations

import ast
import hashlib
import json
from pathlib import Path

from .errors import InvalidConfigError

def parse_value(text: str):
    """JSON literal first (``true``, ``null``, lists), then Python literal, else the bare string."""
    text = text.strip()
    try:
        return json.loads(text)
    except ValueError:
        pass
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_flat_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InvalidConfigError(f"config file {p} not found")
    out = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            raise InvalidConfigError(f"{p}:{lineno}: tables are not supported in flat configs")
        if "=" not in line:
            raise InvalidConfigError(f"{p}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def write_flat_config(path, values: dict) -> None:
    lines = [f"{k} = {json.dumps(list(v) if isinstance(v, tuple) else v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def config_hash(values: dict) -> str:
    blob = json.dumps(values, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
