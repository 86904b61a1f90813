"""Frozen calibration constants, stored as ``name = value`` lines.

The values come from ``python -m rlab.calibrate`` run on seeds that no test
uses; tests and experiments only read them.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from pathlib import Path

from .errors import ConfigParse

FILENAME = "constants.txt"


def parse_constants(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParse("expected 'name = value'", line=lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = float(val)
        except ValueError:
            raise ConfigParse(f"value {val!r} is not a number", key=key, line=lineno) from None
    return out


def format_constants(values: dict, header: str = "") -> str:
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    lines += [f"{k} = {values[k]!r}" for k in sorted(values)]
    return "\n".join(lines) + "\n"


@lru_cache(maxsize=1)
def load() -> dict:
    return parse_constants(resources.files("rlab").joinpath(FILENAME).read_text())


def get(name: str) -> float:
    table = load()
    if name not in table:
        raise KeyError(f"no frozen constant named {name!r}")
    return table[name]


def path() -> Path:
    return Path(str(resources.files("rlab").joinpath(FILENAME)))
