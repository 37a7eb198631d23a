"""Experiment config files (TOML) and dotted-key overrides.

Sections mirror the modules::

    [experiment]   profile, rate_rps, duration_ms, iterations, modal_k, seed,
                   workers, default_target, default_target_percentage
    [workload]     bloat_mb, prime_n, sleep_ms   (turns the profile into "custom")
    [calibration]  cpu_base_ms, cpu_ms_per_unit_prime, mem_overhead_mb
    [sim]          any SimConfig field
    [agent]        any Hyperparams field
    [reward]       tolerance, ref_value
    [sweep]        start, end, step, repetitions
    [output]       dir, qtable, trace

Precedence is override > file > built-in default.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from kpasim.harness import ExperimentConfig
from kpasim.workload import WorkloadProfile, get_profile

ENV_CONFIG = "KPASIM_CONFIG"

_NESTED = {"sim": "sim", "agent": "hp", "reward": "reward", "sweep": "sweep", "calibration": "calibration"}
_OUTPUT = {"dir": "out_dir", "qtable": "qtable_path", "trace": "trace_path"}
_EXPERIMENT = {"profile", "rate_rps", "duration_ms", "iterations", "modal_k", "seed", "workers",
               "default_target", "default_target_percentage"}
_WORKLOAD = ("bloat_mb", "prime_n", "sleep_ms")
# sections applied in this order so that [workload] edits the chosen profile
_ORDER = ("experiment", "workload", "calibration", "sim", "agent", "reward", "sweep", "output")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _coerce(key: str, value, default):
    """Match ``value`` to the type of the field's default."""
    if default is None or value is None:
        return value
    kind = type(default)
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if kind is str and not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def _field_names(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _set(cfg: ExperimentConfig, section: str, name: str, value) -> ExperimentConfig:
    key = f"{section}.{name}"
    try:
        if section == "experiment":
            if name not in _EXPERIMENT:
                raise ConfigError(key, "unknown key")
            if name == "profile":
                if isinstance(value, str):
                    try:
                        return dataclasses.replace(cfg, profile=get_profile(value))
                    except KeyError as exc:
                        raise ConfigError(key, exc.args[0]) from None
                raise ConfigError(key, "expected a builtin profile id such as \"VII\"")
            return dataclasses.replace(cfg, **{name: _coerce(key, value, getattr(cfg, name))})
        if section == "workload":
            if name not in _WORKLOAD:
                raise ConfigError(key, "unknown key")
            fields = _field_names(cfg.profile)
            fields[name] = float(_coerce(key, value, 0.0))
            fields["id"] = "custom"
            return dataclasses.replace(cfg, profile=WorkloadProfile(**fields))
        if section == "output":
            if name not in _OUTPUT:
                raise ConfigError(key, "unknown key")
            if not isinstance(value, str):
                raise ConfigError(key, f"expected a path string, got {value!r}")
            return dataclasses.replace(cfg, **{_OUTPUT[name]: value})
        if section in _NESTED:
            attr = _NESTED[section]
            sub = getattr(cfg, attr)
            fields = _field_names(sub)
            if name not in fields:
                raise ConfigError(key, "unknown key")
            default = fields[name]
            if default is None and section == "agent" and name == "start_conc":
                default = 0
            if default is None and section == "reward" and name == "ref_value":
                default = 0.0
            fields[name] = _coerce(key, value, default)
            return dataclasses.replace(cfg, **{attr: type(sub)(**fields)})
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, str(exc)) from None
    raise ConfigError(key, f"unknown section {section!r}")


def apply_mapping(cfg: ExperimentConfig, data: dict) -> ExperimentConfig:
    for section in data:
        if section not in _ORDER:
            raise ConfigError(section, "unknown section")
        if not isinstance(data[section], dict):
            raise ConfigError(section, "expected a table of keys")
    for section in _ORDER:
        for name, value in data.get(section, {}).items():
            cfg = _set(cfg, section, name, value)
    return cfg


def parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key.count(".") != 1:
        raise ConfigError(key, "override key must be section.key")
    section, name = key.split(".")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, name, value


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    for text in overrides or ():
        section, name, value = parse_override(text)
        cfg = _set(cfg, section, name, value)
    return cfg


def load_config(path=None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc}") from None
    return apply_mapping(cfg, data)
