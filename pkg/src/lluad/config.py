"""Text configuration files and flag/file/default precedence.

The format is deliberately plain: one `key = value` per line, `#` starts
a comment, blank lines are ignored.  Values stay strings until the
consumer coerces them, so the same loader serves daemons and batch
tools.
"""

from __future__ import annotations

from typing import Mapping


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def resolve(
    key: str,
    flag_value,
    config: Mapping[str, str],
    default,
    convert=None,
):
    """flags > config file > default; `convert` coerces config strings."""
    if flag_value is not None:
        return flag_value
    if key in config:
        raw = config[key]
        if convert is None:
            return raw
        try:
            return convert(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return default


def parse_hostport(text: str, default_port: int) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    try:
        return host, int(port)
    except ValueError as exc:
        raise ConfigError(f"bad port in {text!r}") from exc


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")
