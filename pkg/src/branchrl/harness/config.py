"""Flat ``dotted.key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Every key must be known; values
are coerced to the type of the field's default. Tuples are comma lists.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from ..dynamics import ModelConfig
from ..envs import ENVS
from ..probe import ProbeConfig
from ..rollout import LoopConfig, RolloutSchedule
from ..sac import SacConfig
from ..value_expansion import ExpansionConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env_name: str = "pendulum"
    env_params: dict = field(default_factory=dict)
    loop: LoopConfig = field(default_factory=LoopConfig)
    schedule: RolloutSchedule = field(default_factory=RolloutSchedule)
    sac: SacConfig = field(default_factory=SacConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    probe_rollouts: int = 20
    seed: int = 0
    output_dir: str = ""
    wall_time: bool = False

    def make_env(self):
        return ENVS[self.env_name](**self.env_params)


# section name -> attribute of ExperimentConfig holding a dataclass
_SECTIONS = {"loop": "loop", "schedule": "schedule", "sac": "sac", "model": "model",
             "value_expansion": "expansion", "probe": "probe"}
_TOP = {"seed": "seed", "output_dir": "output_dir", "log.wall_time": "wall_time",
        "probe.n_rollouts": "probe_rollouts", "env.name": "env_name"}
# config spellings that differ from the field names
_ALIASES = {("value_expansion", "H"): "horizon"}


def _coerce(raw: str, default, key: str):
    s = raw.strip()
    try:
        if isinstance(default, bool):
            low = s.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        if isinstance(default, tuple):
            parts = [p.strip() for p in s.split(",") if p.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(p) for p in parts)
            if default and isinstance(default[0], int):
                return tuple(int(p) for p in parts)
            return tuple(_number(p) for p in parts)
        if default is None:
            return None if s.lower() in ("none", "") else float(s)
        return s
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _number(s):
    try:
        return int(s)
    except ValueError:
        return float(s)


def parse_lines(text: str) -> dict:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in pairs:
            raise ConfigError(f"line {n}: duplicate key {key}")
        pairs[key] = value
    return pairs


def apply_overrides(cfg: ExperimentConfig, pairs: dict) -> ExperimentConfig:
    """New config with ``pairs`` applied; validation runs through each block's constructor."""
    blocks = {name: dataclasses.asdict(getattr(cfg, attr)) for name, attr in _SECTIONS.items()}
    top = {attr: getattr(cfg, attr) for attr in _TOP.values()}
    env_params = dict(cfg.env_params)
    expansion_enabled_set = False
    for key, raw in pairs.items():
        if key in _TOP:
            attr = _TOP[key]
            top[attr] = _coerce(raw, getattr(ExperimentConfig(), attr), key)
            continue
        if key.startswith("env.params."):
            try:
                env_params[key[len("env.params."):]] = float(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
            continue
        section, _, name = key.partition(".")
        if section not in blocks or not name:
            raise ConfigError(f"unknown config key: {key}")
        name = _ALIASES.get((section, name), name)
        block = blocks[section]
        if name not in block:
            raise ConfigError(f"unknown config key: {key}")
        default = getattr(type(getattr(cfg, _SECTIONS[section]))(), name)
        block[name] = _coerce(raw, default, key)
        if section == "value_expansion":
            if name == "enabled":
                expansion_enabled_set = True
            elif name == "horizon" and not expansion_enabled_set and "value_expansion.enabled" not in pairs:
                block["enabled"] = True
    if top["env_name"] not in ENVS:
        raise ConfigError(f"unknown environment {top['env_name']!r}; choose from {sorted(ENVS)}")
    try:
        made = {name: type(getattr(cfg, attr))(**blocks[name]) for name, attr in _SECTIONS.items()}
        ENVS[top["env_name"]](**env_params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(env_params=env_params, **top, **{_SECTIONS[k]: v for k, v in made.items()})


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return apply_overrides(base or ExperimentConfig(), parse_lines(text))


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def config_text(cfg: ExperimentConfig) -> str:
    """Canonical snapshot: every key, sorted; parses back to an equal config."""
    lines = {}
    for key, attr in _TOP.items():
        lines[key] = _fmt(getattr(cfg, attr))
    for k, v in cfg.env_params.items():
        lines[f"env.params.{k}"] = _fmt(v)
    for section, attr in _SECTIONS.items():
        for f in dataclasses.fields(getattr(cfg, attr)):
            name = "H" if (section, f.name) == ("value_expansion", "horizon") else f.name
            lines[f"{section}.{name}"] = _fmt(getattr(getattr(cfg, attr), f.name))
    return "".join(f"{k} = {lines[k]}\n" for k in sorted(lines))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()
