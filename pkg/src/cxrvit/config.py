"""Flat ``key = value`` config files and flag/file/default resolution."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional, Tuple


class ConfigError(ValueError):
    pass


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Option:
    name: str  # underscore form; the flag is --name-with-dashes
    type: Callable[[str], Any]
    default: Any
    help: str
    flag_only: bool = False  # e.g. boolean switches spelled as bare flags

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def read_config(path) -> Dict[str, Tuple[str, int]]:
    """Parse ``key = value`` lines; returns {key: (raw value, line number)}.

    ``#`` starts a comment, blank lines are skipped, keys may use dashes or
    underscores, and a repeated key is an error.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: Dict[str, Tuple[str, int]] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} (first on line {values[key][1]})")
        values[key] = (value, lineno)
    return values


def resolve(
    options: Iterable[Option], flags: Dict[str, Any], config_path: Optional[str] = None
) -> Tuple[Dict[str, Any], Dict[str, str]]:
    """Merge with precedence flags > config file > defaults.

    ``flags`` holds only explicitly given flag values. Returns the values and
    the source of each ("flag", "file" or "default").
    """
    options = {o.name: o for o in options}
    file_values = read_config(config_path) if config_path else {}
    unknown = sorted(set(file_values) - set(options))
    if unknown:
        key = unknown[0]
        raise ConfigError(
            f"{config_path}:{file_values[key][1]}: unknown key {key!r}; valid keys: {', '.join(sorted(options))}"
        )
    values, sources = {}, {}
    for name, opt in options.items():
        if flags.get(name) is not None:
            values[name], sources[name] = flags[name], "flag"
        elif name in file_values:
            raw, lineno = file_values[name]
            try:
                values[name] = opt.type(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{config_path}:{lineno}: bad value for {name}: {exc}") from None
            sources[name] = "file"
        else:
            values[name], sources[name] = opt.default, "default"
    return values, sources
