import ast
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Self

logger = logging.getLogger(__name__)


class ConfigDict(defaultdict):
    """
    Nested configuration mapping that remembers which keys were read.

    Reading a missing key yields an empty nested ConfigDict, so optional
    sections can be read without KeyErrors. Keys that were never read can be
    listed with `unused()` (typo detection) or dropped with `clean()`.
    """

    DEFAULTS: dict[str, Any] = {"seed": 0}

    def __init__(self, *args, **kwargs):
        super().__init__(ConfigDict, *args, **kwargs)
        self._touched: set[str] = set()

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        return cls({str(k): _wrap(v) for k, v in data.items()})

    def _store(self, key: str, value: Any, touch: bool):
        if touch:
            self[key] = value
        else:
            # Bypasses __setitem__ so the key stays unread
            super().__setitem__(key, value)

    def nested_update(self, other: dict, touch=False) -> Self:
        for key, value in other.items():
            key = str(key)
            current = super().get(key)
            if isinstance(value, dict) and isinstance(current, ConfigDict):
                current.nested_update(value, touch=touch)
                continue
            if isinstance(value, dict) and current is not None:
                logger.warning(f"Replacing value of '{key}' with a section")
            self._store(key, _wrap(value), touch)
        return self

    def __getitem__(self, key):
        key = str(key)
        self._touched.add(key)
        return super().__getitem__(key)

    def __setitem__(self, key, value):
        key = str(key)
        self._touched.add(key)
        super().__setitem__(key, value)

    def get(self, key, default=None):
        key = str(key)
        return self[key] if key in self else default

    def require(self, key: str) -> Any:
        """Return the value for `key`, raising ValueError if it is absent."""
        if key not in self:
            raise ValueError(f"Missing required config key '{key}'")
        return self[key]

    def unused(self, prefix: str = "") -> list[str]:
        """Dotted names of all leaf keys that were never read."""
        names = []
        for key in self.keys():
            value = super().__getitem__(key)
            if key not in self._touched:
                names.append(f"{prefix}{key}")
            elif isinstance(value, ConfigDict):
                names.extend(value.unused(prefix=f"{prefix}{key}."))
        return names

    def clean(self):
        """Drop every key that was never read, in nested sections too."""
        for key in [k for k in self.keys() if k not in self._touched]:
            super().__delitem__(key)
        for value in self.values():
            if isinstance(value, ConfigDict):
                value.clean()


def _wrap(value: Any) -> Any:
    return ConfigDict.from_dict(value) if isinstance(value, dict) else value


def _parse_value(raw: str) -> Any:
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        # Bare words such as `smearing = gaussian`
        if raw and all(ch.isalnum() or ch in "-_./" for ch in raw):
            return raw
        raise


def parse_config_text(text: str, source: str = "<string>") -> ConfigDict:
    """
    Parse the `key = value` structured-text format.

    One entry per line; `#` starts a comment; values are Python literals
    (numbers, strings, lists and tuples) or bare words. Dotted keys create
    nested sections, e.g. `bench.gaps = [1, 0.1]`.
    """
    data: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        try:
            value = _parse_value(raw)
        except (ValueError, SyntaxError) as e:
            raise ValueError(f"{source}:{lineno}: cannot parse value {raw!r}") from e

        section = data
        *parents, leaf = key.split(".")
        for parent in parents:
            section = section.setdefault(parent, {})
            if not isinstance(section, dict):
                raise ValueError(f"{source}:{lineno}: '{parent}' is not a section")
        if leaf in section:
            raise ValueError(f"{source}:{lineno}: duplicate key '{key}'")
        section[leaf] = value

    return ConfigDict().nested_update(data, touch=False)


def load_config(path: Path, defaults: dict | None = None) -> ConfigDict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config file {path} does not exist")

    config = parse_config_text(path.read_text(), source=str(path))
    defaults = defaults if defaults is not None else ConfigDict.DEFAULTS
    for key, value in defaults.items():
        if key not in config:
            super(ConfigDict, config).__setitem__(key, value)
    return config


def _format_entries(config: dict, prefix: str = "") -> list[str]:
    lines = []
    for key in sorted(config.keys(), key=str):
        value = dict.__getitem__(config, key)
        if isinstance(value, dict):
            lines.extend(_format_entries(value, prefix=f"{prefix}{key}."))
        else:
            lines.append(f"{prefix}{key} = {value!r}")
    return lines


def save_config(config: dict, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(_format_entries(config)) + "\n")
