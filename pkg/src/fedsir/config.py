"""Experiment configuration files: a sectioned key-value (INI) format.

Sections map one-to-one onto the config dataclasses::

    [experiment]   method, seed, rounds, relabel_period, residual_rank, ...
    [data]         DataGenConfig fields
    [model]        hidden_dim, feature_dim
    [stage1]       identification-stage LocalTrainConfig
    [stage2]       per-round LocalTrainConfig
    [la]           beta, epsilon
    [kd]           temperature, kd_weight, scale_by_t2
    [ablation]     relabel, la, kd, daagg (on/off)

Every key is optional; omitted keys take the dataclass defaults. Unknown
sections and keys are rejected. Per-stage and data ``rng_seed`` fields are not
configurable: every stream is derived from ``experiment.seed``.
Per-client noise rates are written ``client_noise_rates = 0:0.2, 4:0.9``.
"""
from __future__ import annotations

import collections.abc
import configparser
import dataclasses
import io
import typing
from dataclasses import replace
from pathlib import Path
from typing import Any, Mapping

from fedsir.datagen import DataGenConfig
from fedsir.losses import KDConfig, LAConfig
from fedsir.model import LocalTrainConfig
from fedsir.orchestrator import Ablation, ExperimentConfig, ModelConfig

# section name -> ExperimentConfig attribute holding it ("" is the top level)
SECTIONS: dict[str, str] = {
    "experiment": "",
    "data": "data",
    "model": "model",
    "stage1": "stage1",
    "stage2": "stage2",
    "la": "la",
    "kd": "kd",
    "ablation": "ablation",
}
_SECTION_TYPES = {
    "experiment": ExperimentConfig,
    "data": DataGenConfig,
    "model": ModelConfig,
    "stage1": LocalTrainConfig,
    "stage2": LocalTrainConfig,
    "la": LAConfig,
    "kd": KDConfig,
    "ablation": Ablation,
}
_HIDDEN = {"rng_seed"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def section_keys(section: str) -> dict[str, Any]:
    """Configurable keys of ``section`` mapped to their resolved type hints."""
    cls = _SECTION_TYPES[section]
    hints = typing.get_type_hints(cls)
    nested = set(SECTIONS.values()) if section == "experiment" else set()
    keys = {}
    for f in dataclasses.fields(cls):
        if f.name in _HIDDEN or f.name in nested:
            continue
        keys[f.name] = hints[f.name]
    return keys


def _parse_value(raw: str, hint: Any, path: str) -> Any:
    text = raw.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if typing.get_origin(hint) is collections.abc.Mapping:
            return _parse_rates(text)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(path, f"unsupported field type {hint!r}")


def _parse_rates(text: str) -> dict[int, float]:
    rates: dict[int, float] = {}
    for item in filter(None, (p.strip() for p in text.split(","))):
        key, sep, value = item.partition(":")
        if not sep:
            raise ValueError(f"expected client:rate pairs, got {item!r}")
        client = int(key)
        if client in rates:
            raise ValueError(f"client {client} listed twice")
        rates[client] = float(value)
    return rates


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Mapping):
        return ", ".join(f"{k}:{value[k]!r}" for k in sorted(value))
    return str(value)


def _build_section(section: str, default: Any, values: dict[str, Any]) -> Any:
    """``replace(default, **values)``, attributing a validation failure to one key."""
    try:
        return replace(default, **values)
    except ValueError as exc:
        for key, value in values.items():
            try:
                replace(default, **{key: value})
            except ValueError as single:
                raise ConfigError(f"{section}.{key}", str(single)) from None
        raise ConfigError(section, str(exc)) from None


def from_mapping(sections: Mapping[str, Mapping[str, str]], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a validated config from raw ``{section: {key: text}}`` values over ``base``."""
    base = base if base is not None else ExperimentConfig()
    for section in sections:
        if section not in SECTIONS:
            raise ConfigError(section, f"unknown section (expected one of {', '.join(SECTIONS)})")
    parts: dict[str, Any] = {}
    for section, attr in SECTIONS.items():
        if not attr:
            continue
        raw = sections.get(section, {})
        keys = section_keys(section)
        values = {}
        for key, text in raw.items():
            if key not in keys:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[key] = _parse_value(text, keys[key], f"{section}.{key}")
        if section in ("stage1", "stage2") and values.get("learning_rate", 1.0) <= 0:
            raise ConfigError(f"{section}.learning_rate", "learning_rate must be > 0")
        parts[attr] = _build_section(section, getattr(base, attr), values)
    top = {}
    keys = section_keys("experiment")
    for key, text in sections.get("experiment", {}).items():
        if key not in keys:
            raise ConfigError(f"experiment.{key}", "unknown key")
        top[key] = _parse_value(text, keys[key], f"experiment.{key}")
    return _build_section("experiment", replace(base, **parts), top)


def parse_text(text: str, base: ExperimentConfig | None = None, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keep key case so unknown-key errors echo what was written
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(source, f"malformed file: {exc}") from None
    return from_mapping({s: dict(parser[s]) for s in parser.sections()}, base)


def parse_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read and validate a config file; omitted keys keep the defaults."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc.strerror or exc}") from None
    return parse_text(text, base, str(path))


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` strings (a bare ``key`` means ``experiment.key``)."""
    sections: dict[str, dict[str, str]] = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "override must look like section.key=value")
        section, dot, name = key.strip().rpartition(".")
        sections.setdefault(section if dot else "experiment", {})[name] = value
    return from_mapping(sections, cfg)


def to_sections(cfg: ExperimentConfig) -> dict[str, dict[str, str]]:
    out = {}
    for section, attr in SECTIONS.items():
        obj = getattr(cfg, attr) if attr else cfg
        out[section] = {key: _format_value(getattr(obj, key)) for key in section_keys(section)}
    return out


def emit_config(cfg: ExperimentConfig) -> str:
    """Effective config as INI text; ``parse_text(emit_config(c)) == c`` up to rng_seed fields."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    parser.read_dict(to_sections(cfg))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
