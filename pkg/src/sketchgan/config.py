"""Run configuration files.

A run config is an INI-style key = value file with four sections::

    [train]      TrainConfig fields (fade_schedule as "16:500,32:700,64:800")
    [weights]    loss coefficients
    [xdog]       sketch filter parameters
    [paths]      manifest, out

Unknown sections or keys are rejected. Writing then reading a config gives
back an equal object.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import XdogParams
from .losses import LossWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


PATH_KEYS = ("manifest", "out")
_NESTED = {"weights": LossWeights, "xdog": XdogParams}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.paths) - set(PATH_KEYS)
        if unknown:
            raise ConfigError(f"unknown path keys: {sorted(unknown)}")

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_overrides(self, train: dict | None = None, paths: dict | None = None) -> "RunConfig":
        """Apply flag values on top of file values (``None`` means not given)."""
        train = {k: v for k, v in (train or {}).items() if v is not None}
        paths = {k: str(v) for k, v in (paths or {}).items() if v is not None}
        return RunConfig(replace(self.train, **train), {**self.paths, **paths})


# --------------------------------------------------------------------------
# value formatting


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return ",".join(f"{r}:{s}" for r, s in value)
        return ",".join(str(v) for v in value)
    return str(value)


def format_schedule(schedule) -> str:
    return _format(tuple(tuple(s) for s in schedule))


def parse_schedule(text: str) -> tuple[tuple[int, int], ...]:
    stages = []
    for part in text.split(","):
        try:
            res, steps = part.split(":")
            stages.append((int(res), int(steps)))
        except ValueError:
            raise ConfigError(f"bad fade schedule stage {part!r}; expected resolution:steps") from None
    return tuple(stages)


def _parse(name: str, text: str, default):
    text = text.strip()
    try:
        if name == "fade_schedule":
            return parse_schedule(text)
        if name == "widths":
            return tuple(int(v) for v in text.split(","))
        if name == "taps":
            return None if text == "" else tuple(int(v) for v in text.split(","))
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


# --------------------------------------------------------------------------
# reading and writing


def dumps(config: RunConfig) -> str:
    t = config.train
    lines = ["[train]"]
    for f in fields(TrainConfig):
        if f.name in _NESTED:
            continue
        lines.append(f"{f.name} = {_format(getattr(t, f.name))}")
    for section in _NESTED:
        lines += ["", f"[{section}]"]
        for key, value in asdict(getattr(t, section)).items():
            lines.append(f"{key} = {_format(value)}")
    lines += ["", "[paths]"]
    for key in PATH_KEYS:
        lines.append(f"{key} = {config.paths.get(key, '')}")
    return "\n".join(lines) + "\n"


def loads(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    allowed = {"train", "paths", *_NESTED}
    extra = set(parser.sections()) - allowed
    if extra:
        raise ConfigError(f"{source}: unknown sections {sorted(extra)}")

    defaults = TrainConfig()
    train_kw = {}
    if parser.has_section("train"):
        known = {f.name for f in fields(TrainConfig)} - set(_NESTED)
        for key, value in parser.items("train"):
            if key not in known:
                raise ConfigError(f"{source}: unknown key [train] {key}")
            train_kw[key] = _parse(key, value, getattr(defaults, key))
    for section, cls in _NESTED.items():
        if not parser.has_section(section):
            continue
        base = asdict(getattr(defaults, section))
        kw = {}
        for key, value in parser.items(section):
            if key not in base:
                raise ConfigError(f"{source}: unknown key [{section}] {key}")
            kw[key] = _parse(key, value, base[key])
        try:
            train_kw[section] = cls(**{**base, **kw})
        except ValueError as exc:
            raise ConfigError(f"{source}: [{section}] {exc}") from None
    paths = {}
    if parser.has_section("paths"):
        for key, value in parser.items("paths"):
            if key not in PATH_KEYS:
                raise ConfigError(f"{source}: unknown key [paths] {key}")
            if value.strip():
                paths[key] = value.strip()
    try:
        return RunConfig(TrainConfig(**train_kw), paths)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def read_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return loads(path.read_text(), source=str(path))


def write_config(path: str | os.PathLike, config: RunConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(config))
    return path
