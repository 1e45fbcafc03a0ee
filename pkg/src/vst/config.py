"""Flat ``key = value`` config files and layered resolution (CLI > file > default).

Values use a TOML-compatible subset: integers, floats, ``true``/``false``,
double-quoted strings and single-line arrays of those. ``#`` starts a comment.
"""
import ast
import json
import re
from pathlib import Path

from .errors import ConfigError

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def _parse_value(text, where):
    text = text.strip()
    if text in ("true", "false"):
        return text == "true"
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError(f"{where}: unterminated array {text!r}")
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(part, where) for part in _split_items(inner, where)]
    if text.startswith('"'):
        try:
            value = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad string {text!r}") from exc
        if not isinstance(value, str):
            raise ConfigError(f"{where}: bad string {text!r}")
        return value
    try:
        value = ast.literal_eval(text.replace("_", ""))
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"{where}: cannot parse value {text!r}") from exc
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: unsupported value {text!r}")
    return value


def _split_items(inner, where):
    items, buf, in_str = [], "", False
    for ch in inner:
        if ch == '"':
            in_str = not in_str
        if ch == "," and not in_str:
            items.append(buf)
            buf = ""
        else:
            buf += ch
    if in_str:
        raise ConfigError(f"{where}: unterminated string in array")
    if buf.strip():
        items.append(buf)
    return items


def _strip_comment(line):
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_str = not in_str
        elif ch == "#" and not in_str:
            return line[:i]
    return line


def parse_config(text, name="<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        where = f"{name}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not _KEY.match(key):
            raise ConfigError(f"{where}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        out[key] = _parse_value(value, where)
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if value is None:
        raise ConfigError("None has no config representation")
    raise ConfigError(f"cannot write {type(value).__name__} to a config file")


def dump_config(values: dict) -> str:
    return "".join(f"{k} = {format_value(values[k])}\n" for k in sorted(values) if values[k] is not None)


def resolve(defaults: dict, file_values: dict = None, cli_values: dict = None) -> dict:
    """Layer values; unknown keys from either source are an error.

    ``cli_values`` entries equal to None mean "not given on the command line".
    """
    merged = dict(defaults)
    for source, values in (("config file", file_values or {}), ("command line", cli_values or {})):
        for key, value in values.items():
            if key not in defaults:
                raise ConfigError(f"unknown {source} key {key!r}")
            if value is None:
                continue
            default = defaults[key]
            if isinstance(default, tuple) and isinstance(value, list):
                value = tuple(value)
            elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            elif default is not None and not isinstance(value, type(default)):
                raise ConfigError(f"{source} key {key!r} expects {type(default).__name__}, "
                                  f"got {type(value).__name__}")
            merged[key] = value
    return merged


def write_resolved(out_dir, values: dict) -> Path:
    path = Path(out_dir) / "config.resolved"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(values))
    return path
