"""Run configuration files (INI sections, every key optional).

Sections::

    [train]      TrainConfig hyperparameters
    [encoder]    profile, embed_dim
    [data]       root, manifest
    [synthetic]  SyntheticSpec fields used by ``gen-data``
    [logging]    level

Unknown sections or keys are rejected. :func:`render` writes the fully
resolved configuration, which is what every run echoes into its output
directory.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from .core import ConfigError, TrainConfig
from .data import SyntheticSpec

# keys of TrainConfig that live in other sections
_ENCODER_KEYS = {"profile": "encoder_profile", "embed_dim": "embed_dim"}
_DATA_KEYS = {"root": "data_root", "manifest": "manifest"}
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)
               if f.name not in set(_ENCODER_KEYS.values()) | set(_DATA_KEYS.values())]
_SYNTH_KEYS = [f.name for f in dataclasses.fields(SyntheticSpec)]
_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    log_level: str = "INFO"


def _convert(section: str, key: str, raw: str, default):
    """Parse ``raw`` to the type of ``default``."""
    where = f"[{section}] {key}"
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return None if raw.lower() in ("", "none") else float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(","))
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    return raw


def _defaults(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def parse(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    allowed = {"train": _TRAIN_KEYS, "encoder": list(_ENCODER_KEYS), "data": list(_DATA_KEYS),
               "synthetic": _SYNTH_KEYS, "logging": ["level"]}
    for sec in cp.sections():
        if sec not in allowed:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        unknown = sorted(set(cp[sec]) - set(allowed[sec]))
        if unknown:
            raise ConfigError(f"{source}: unknown key(s) in [{sec}]: {', '.join(unknown)}")

    train_defaults = _defaults(TrainConfig())
    train_defaults["alpha"] = None  # an unset alpha follows epsilon
    train = {}
    for sec, mapping in (("train", {k: k for k in _TRAIN_KEYS}), ("encoder", _ENCODER_KEYS),
                         ("data", _DATA_KEYS)):
        if cp.has_section(sec):
            for key, raw in cp[sec].items():
                name = mapping[key]
                train[name] = _convert(sec, key, raw, train_defaults[name])
    synth_defaults = _defaults(SyntheticSpec())
    synth = {}
    if cp.has_section("synthetic"):
        for key, raw in cp["synthetic"].items():
            synth[key] = _convert("synthetic", key, raw, synth_defaults[key])
    level = cp.get("logging", "level", fallback="INFO").upper()
    if level not in _LOG_LEVELS:
        raise ConfigError(f"[logging] level must be one of {', '.join(_LOG_LEVELS)}")

    spec = SyntheticSpec(**synth)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"[synthetic] {exc}") from None
    return RunConfig(TrainConfig(**train), spec, level)


def load(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(encoding="utf-8"), str(path))


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, str]) -> RunConfig:
    """Apply ``section.key=value`` overrides on top of ``cfg``."""
    if not overrides:
        return cfg
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    cp.read_string(render(cfg))
    for dotted, value in overrides.items():
        sec, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        if not cp.has_section(sec):
            raise ConfigError(f"unknown section [{sec}] in override {dotted!r}")
        if key not in cp[sec]:
            raise ConfigError(f"unknown key(s) in [{sec}]: {key}")
        cp[sec][key] = str(value)
    buf = io.StringIO()
    cp.write(buf)
    return parse(buf.getvalue(), "<overrides>")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


def render(cfg: RunConfig) -> str:
    """The fully resolved configuration as INI text."""
    t = cfg.train
    lines = ["[train]"]
    lines += [f"{k} = {_fmt(getattr(t, k))}" for k in _TRAIN_KEYS]
    lines += ["", "[encoder]"]
    lines += [f"{k} = {_fmt(getattr(t, v))}" for k, v in _ENCODER_KEYS.items()]
    lines += ["", "[data]"]
    lines += [f"{k} = {_fmt(getattr(t, v))}" for k, v in _DATA_KEYS.items()]
    lines += ["", "[synthetic]"]
    lines += [f"{k} = {_fmt(getattr(cfg.synthetic, k))}" for k in _SYNTH_KEYS]
    lines += ["", "[logging]", f"level = {cfg.log_level}", ""]
    return "\n".join(lines)
