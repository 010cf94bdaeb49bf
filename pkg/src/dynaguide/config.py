"""Flat ``key=value`` configuration files with dotted section prefixes.

One option per line (``sim.dt=0.005``), ``#`` comments, blank lines ignored.
The canonical serialization sorts keys, so two configs with the same content
hash identically no matter how they were assembled, and textual diffs stay
line-per-option.
"""

from __future__ import annotations

import hashlib
import re
from pathlib import Path

_KEY_RE = re.compile(r"[a-z0-9_]+(\.[a-z0-9_]+)*")


class ConfigError(ValueError):
    """Malformed configuration text or an invalid option value."""


def parse_config(text: str) -> dict[str, str]:
    """Parse config text into a ``{key: raw value}`` mapping.

    Keys are lowercase dotted identifiers; duplicates are rejected so a typo
    cannot silently lose an override.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        value = value.strip()
        if not _KEY_RE.fullmatch(key):
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_config(mapping: dict[str, str]) -> str:
    """Canonical text form: sorted ``key=value`` lines."""
    lines = []
    for key in sorted(mapping):
        if not _KEY_RE.fullmatch(key):
            raise ConfigError(f"bad key {key!r}")
        value = str(mapping[key])
        if "\n" in value:
            raise ConfigError(f"value for {key!r} contains a newline")
        lines.append(f"{key}={value}\n")
    return "".join(lines)


def load_config(path: str | Path) -> dict[str, str]:
    """Read and parse a config file; missing files raise FileNotFoundError."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def save_config(path: str | Path, mapping: dict[str, str]) -> None:
    Path(path).write_text(format_config(mapping), encoding="utf-8")


def config_hash(mapping: dict[str, str]) -> str:
    """SHA-256 of the canonical serialization."""
    return hashlib.sha256(format_config(mapping).encode("utf-8")).hexdigest()


def merge(base: dict[str, str], *overrides: dict[str, str]) -> dict[str, str]:
    """Later mappings win key-by-key; inputs are not mutated."""
    out = dict(base)
    for o in overrides:
        out.update(o)
    return out


def subsection(mapping: dict[str, str], prefix: str) -> dict[str, str]:
    """Options under ``prefix.`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in mapping.items() if k.startswith(head)}


# ---------------------------------------------------------------------------
# typed access
# ---------------------------------------------------------------------------

def _missing(key: str):
    raise ConfigError(f"missing config key {key!r}")


def get_str(mapping: dict[str, str], key: str) -> str:
    if key not in mapping:
        _missing(key)
    return mapping[key]


def get_int(mapping: dict[str, str], key: str) -> int:
    raw = get_str(mapping, key)
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected an integer, got {raw!r}") from None


def get_float(mapping: dict[str, str], key: str) -> float:
    raw = get_str(mapping, key)
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected a number, got {raw!r}") from None
    return value


def get_bool(mapping: dict[str, str], key: str) -> bool:
    raw = get_str(mapping, key)
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ConfigError(f"key {key!r}: expected true or false, got {raw!r}")


def get_int_tuple(mapping: dict[str, str], key: str) -> tuple[int, ...]:
    raw = get_str(mapping, key)
    try:
        return tuple(int(part.strip()) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"key {key!r}: expected comma-separated integers, got {raw!r}") from None


_GETTERS = {
    "str": get_str,
    "int": get_int,
    "float": get_float,
    "bool": get_bool,
    "ints": get_int_tuple,
}


def validate(mapping: dict[str, str], schema: dict[str, str]) -> dict[str, object]:
    """Check every key against a ``{key: type name}`` schema and convert.

    Unknown keys are an error (they are always typos or version skew, and the
    cost of a silently ignored option in a long training run is high).
    """
    unknown = sorted(set(mapping) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out: dict[str, object] = {}
    for key in mapping:
        out[key] = _GETTERS[schema[key]](mapping, key)
    return out
