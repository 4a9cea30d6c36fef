"""
YAML configuration loading.

Values are merged over dataclass defaults, and every validation failure is
reported against the line of the key that caused it.
"""
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from .errors import ConfigError, DataError

KeyPath = Tuple[str, ...]


def _deep_merge(base: Dict, update: Dict) -> Dict:
    """Deep merge two dictionaries"""
    result = base.copy()
    for key, value in update.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _deep_merge(result[key], value)
        else:
            result[key] = value
    return result


class ConfigSource:
    """Parsed YAML mapping plus the line of every key in it."""

    def __init__(self, data: Dict, lines: Dict[KeyPath, int], name: str = "<config>"):
        self.data = data
        self.lines = lines
        self.name = name

    @classmethod
    def from_text(cls, text: str, name: str = "<config>") -> "ConfigSource":
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            problem = getattr(e, "problem", None) or str(e)
            raise ConfigError(problem, mark.line + 1 if mark else None, name) from e
        if data is None:
            return cls({}, {}, name)
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping", 1, name)
        lines: Dict[KeyPath, int] = {}
        _collect_lines(node, (), lines)
        return cls(data, lines, name)

    @classmethod
    def from_path(cls, path: Union[str, Path]) -> "ConfigSource":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror}", None, str(path)) from e
        return cls.from_text(text, str(path))

    def line(self, path: KeyPath) -> Optional[int]:
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path[:-1]
        return None

    def error(self, path: KeyPath, message: str) -> ConfigError:
        return ConfigError(message, self.line(path), self.name)


def _collect_lines(node, prefix: KeyPath, lines: Dict[KeyPath, int]) -> None:
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (str(key_node.value),)
            lines[path] = key_node.start_mark.line + 1
            _collect_lines(value_node, path, lines)


def _check_type(value: Any, default: Any) -> bool:
    if default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple))
    return isinstance(value, type(default))


def build_section(cls, values: Dict, source: ConfigSource, path: KeyPath):
    """Instantiate dataclass `cls` from a mapping, anchoring errors to lines."""
    if not isinstance(values, dict):
        raise source.error(path, f"section {'.'.join(path)} must be a mapping")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise source.error(path + (key,), f"unknown key {'.'.join(path + (key,))!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        value = values[f.name]
        default = getattr(defaults, f.name)
        if is_dataclass(default):
            continue
        if not _check_type(value, default):
            raise source.error(path + (f.name,),
                               f"{'.'.join(path + (f.name,))} expects {type(default).__name__}, "
                               f"got {type(value).__name__}")
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (DataError, TypeError, ValueError) as e:
        raise source.error(path, str(e)) from e


def dump_yaml(data: Dict) -> str:
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None)
