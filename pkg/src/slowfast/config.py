"""TOML run configuration with ``[model]``, ``[training]`` and ``[data]`` sections.

Keys mirror the dataclass fields verbatim.  Unknown keys and type
mismatches are errors reported with the offending line number.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .model import ConfigError, ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    bpe_merges: int = 1000
    max_positions: int = 256


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def model_config(self, **vocab) -> ModelConfig:
        return ModelConfig(**{**self.model, **vocab})


class ConfigFileError(ConfigError):
    pass


SECTIONS = {"model": ModelConfig, "training": TrainConfig, "data": DataConfig}


def _line_of(text: str, section: str | None, key: str) -> int:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            continue
        if re.match(rf"^{re.escape(key)}\s*=", s) and (section is None or current == section):
            return no
    return 0


def _check_type(value, default, name: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise TypeError(f"{name} expects {type(default).__name__}, got {type(value).__name__}")
    return value


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigFileError(f"{source}: {e}") from None
    out = RunConfig()
    for section, values in raw.items():
        if section not in SECTIONS or not isinstance(values, dict):
            line = _line_of(text, None, section) or next(
                (i for i, l in enumerate(text.splitlines(), 1) if l.strip() == f"[{section}]"), 0)
            raise ConfigFileError(f"{source}:{line}: unknown section or key {section!r}")
        cls = SECTIONS[section]
        known = {f.name: f for f in fields(cls)}
        defaults = cls() if section != "model" else ModelConfig()
        clean = {}
        for key, value in values.items():
            line = _line_of(text, section, key)
            if key not in known:
                raise ConfigFileError(f"{source}:{line}: unknown key {section}.{key}")
            try:
                clean[key] = _check_type(value, getattr(defaults, key), f"{section}.{key}")
            except TypeError as e:
                raise ConfigFileError(f"{source}:{line}: {e}") from None
        if section == "model":
            out.model = clean
        elif section == "training":
            try:
                out.training = TrainConfig(**clean)
            except ValueError as e:
                raise ConfigFileError(f"{source}: {e}") from None
        else:
            out.data = DataConfig(**clean)
    try:
        # validate model keys without vocabulary sizes
        ModelConfig(**out.model)
    except ConfigError as e:
        raise ConfigFileError(f"{source}: {e}") from None
    return out


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))
