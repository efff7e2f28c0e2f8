"""INI-style run configuration with typed, key-naming accessors."""

from __future__ import annotations

import configparser
import hashlib
import math
from pathlib import Path

from .errors import ConfigError

_MISSING = object()


class Config:
    """Thin wrapper over :mod:`configparser` that reports ``[section].key`` on every error.

    Relative paths are resolved against the directory holding the config file.
    """

    def __init__(self, text: str, base_dir: Path | None = None, source: str = "<string>"):
        self.text = text
        self.source = source
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        parser = configparser.ConfigParser(
            inline_comment_prefixes=(";", "#"), interpolation=None, empty_lines_in_values=False
        )
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        self.parser = parser

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls(path.read_text(encoding="utf-8"), path.resolve().parent, str(path))

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def has(self, section: str, key: str | None = None) -> bool:
        if key is None:
            return self.parser.has_section(section)
        return self.parser.has_option(section, key)

    def sections(self, prefix: str = "") -> list[str]:
        return [s for s in self.parser.sections() if s.startswith(prefix)]

    def _raw(self, section, key, default):
        if self.parser.has_option(section, key):
            value = self.parser.get(section, key).strip()
            if value != "":
                return value
        if default is _MISSING:
            raise ConfigError(f"missing required key [{section}].{key}")
        return default

    def get(self, section: str, key: str, default=_MISSING):
        return self._raw(section, key, default)

    def get_int(self, section: str, key: str, default=_MISSING, minimum: int | None = None):
        raw = self._raw(section, key, default)
        if raw is default:
            return raw
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"[{section}].{key}: expected an integer, got {raw!r}") from None
        if minimum is not None and value < minimum:
            raise ConfigError(f"[{section}].{key}: must be >= {minimum}, got {value}")
        return value

    def get_float(self, section: str, key: str, default=_MISSING):
        raw = self._raw(section, key, default)
        if raw is default:
            return raw
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"[{section}].{key}: expected a number, got {raw!r}") from None
        if math.isnan(value):
            raise ConfigError(f"[{section}].{key}: NaN is not allowed")
        return value

    def get_bool(self, section: str, key: str, default=_MISSING):
        raw = self._raw(section, key, default)
        if raw is default:
            return raw
        low = str(raw).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}].{key}: expected true/false, got {raw!r}")

    def get_list(self, section: str, key: str, default=_MISSING, sep: str = ",") -> list[str]:
        raw = self._raw(section, key, default)
        if raw is default:
            return raw
        return [item.strip() for item in str(raw).split(sep) if item.strip()]

    def get_floats(self, section: str, key: str, default=_MISSING, sep: str = ",") -> list[float]:
        items = self.get_list(section, key, default, sep)
        if items is default:
            return items
        try:
            return [float(v) for v in items]
        except ValueError:
            raise ConfigError(f"[{section}].{key}: expected numbers, got {items!r}") from None

    def get_path(self, section: str, key: str, default=_MISSING) -> Path:
        raw = self._raw(section, key, default)
        if raw is default:
            return raw
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def get_paths(self, section: str, key: str, default=_MISSING) -> list[Path]:
        items = self.get_list(section, key, default)
        if items is default:
            return items
        return [Path(p) if Path(p).is_absolute() else self.base_dir / p for p in items]

    def check_keys(self, section: str, allowed) -> None:
        """Reject unknown keys so typos surface instead of silently using defaults."""
        if not self.parser.has_section(section):
            return
        unknown = sorted(set(self.parser.options(section)) - set(allowed))
        if unknown:
            raise ConfigError(f"[{section}]: unknown key(s) {', '.join(unknown)}")
