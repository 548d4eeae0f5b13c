"""Experiment configuration: dataclasses, TOML loading, presets and hashing."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from ..eft import AgentMode
from ..env import ConfigError, EnvConfig
from ..inference import InferenceConfig
from ..policy import (
    TrainConfig,
    character_space_from_dict,
    env_config_from_dict,
    env_config_to_dict,
    train_config_from_dict,
    train_config_to_dict,
)

PRESETS = ("desk", "paper_scale")


@dataclass(frozen=True)
class OodCase:
    """Restricted training ranges plus the characters planted at inference time.

    Every component of a probe character equals the probe value.
    """

    name: str
    train_ranges: tuple[tuple[float, float], ...]
    probe_values: tuple[float, ...]
    in_distribution_values: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.train_ranges:
            raise ConfigError(f"OOD case {self.name!r} has no training ranges")
        if not self.probe_values:
            raise ConfigError(f"OOD case {self.name!r} has no probe values")


INTERIOR_HOLE = OodCase("interior_hole", ((0.0, 0.6), (0.8, 1.0)), (0.65, 0.70, 0.75), (0.3, 0.9))
EXTERIOR = OodCase("exterior", ((0.2, 0.8),), (0.0, 0.1, 0.9, 1.0), (0.35, 0.65))


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    modes: tuple[str, ...] = tuple(m.value for m in AgentMode)
    diversity_levels: tuple[int, ...] = (1, 2, 3)
    seeds: tuple[int, ...] = tuple(range(10))
    train_seed: int = 0
    noise_sigmas: tuple[float, ...] = (0.0, 0.01, 0.05, 0.1, 0.2, 0.3)
    inference_lengths: tuple[int, ...] = (200, 500, 1000)
    noise_length: int = 1000
    ood_length: int = 1000
    episode_steps: int = 400
    # None means one full evaluation episode
    observer_steps: int | None = None
    ood_cases: tuple[OodCase, ...] = (INTERIOR_HOLE, EXTERIOR)
    behavior_values: tuple[float, ...] = tuple(round(0.1 * k, 1) for k in range(11))
    behavior_steps: int = 400
    eval_seeds: tuple[int, ...] = tuple(range(10))
    output_dir: str = "runs/desk"
    preset: str = "desk"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        bad = [m for m in self.modes if m not in {a.value for a in AgentMode}]
        if bad:
            raise ConfigError(f"unknown modes {bad}")
        if any(n < 1 or n > self.env.n_agents for n in self.diversity_levels):
            raise ConfigError(f"diversity levels must lie in [1, {self.env.n_agents}]")
        if any(s < 0 for s in self.noise_sigmas):
            raise ConfigError("noise sigmas must be non-negative")
        if any(t < 1 for t in self.inference_lengths) or min(self.noise_length, self.ood_length) < 1:
            raise ConfigError("trajectory lengths must be positive")
        if self.episode_steps < 1 or self.behavior_steps < 1:
            raise ConfigError("episode lengths must be positive")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}, expected one of {PRESETS}")

    @property
    def observer_length(self) -> int:
        return self.episode_steps if self.observer_steps is None else self.observer_steps


def group_assignment(n_agents: int, n_groups: int):
    """Group index of every agent; remainder agents go round-robin."""
    return [i % n_groups for i in range(n_agents)]


def preset(name: str) -> ExperimentConfig:
    if name == "desk":
        return ExperimentConfig()
    if name == "paper_scale":
        warnings.warn("paper_scale preset: 21 agents and 3500 x 3000-step training take days on one CPU",
                      RuntimeWarning, stacklevel=2)
        return ExperimentConfig(
            env=EnvConfig(n_agents=21, lanes=3, circumference=300.0),
            train=TrainConfig(episodes=3500, steps_per_episode=3000),
            diversity_levels=tuple(range(1, 8)),
            episode_steps=3000,
            behavior_steps=3000,
            output_dir="runs/paper_scale",
            preset="paper_scale",
        )
    raise ConfigError(f"unknown preset {name!r}, expected one of {PRESETS}")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "env":
            v = env_config_to_dict(v)
        elif f.name == "train":
            v = train_config_to_dict(v)
        elif f.name == "inference":
            v = asdict(v)
        elif f.name == "ood_cases":
            v = [{"name": c.name, "train_ranges": [list(r) for r in c.train_ranges],
                  "probe_values": list(c.probe_values),
                  "in_distribution_values": list(c.in_distribution_values)} for c in v]
        elif isinstance(v, tuple):
            v = list(v)
        d[f.name] = v
    return d


def _check_keys(section: str, given: dict, allowed) -> None:
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(extra)}")


def config_from_dict(d: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay ``d`` on ``base`` (or on the preset named in ``d``, default desk)."""
    d = dict(d)
    if base is None:
        base = preset(d.get("preset", "desk"))
    top = {f.name for f in fields(ExperimentConfig)}
    _check_keys("top level", d, top)
    out = {}
    if "env" in d:
        env_d = env_config_to_dict(base.env)
        _check_keys("env", d["env"], env_d)
        idm = {**env_d["idm"], **d["env"].get("idm", {})}
        out["env"] = env_config_from_dict({**env_d, **d["env"], "idm": idm})
    if "train" in d:
        tr_d = train_config_to_dict(base.train)
        _check_keys("train", d["train"], tr_d)
        cs = {**tr_d["character_space"], **d["train"].get("character_space", {})}
        character_space_from_dict(cs)
        out["train"] = train_config_from_dict({**tr_d, **d["train"], "character_space": cs})
    if "inference" in d:
        _check_keys("inference", d["inference"], asdict(base.inference))
        out["inference"] = replace(base.inference, **d["inference"])
    if "ood_cases" in d:
        out["ood_cases"] = tuple(
            OodCase(c["name"], tuple(tuple(float(x) for x in r) for r in c["train_ranges"]),
                    tuple(float(x) for x in c["probe_values"]),
                    tuple(float(x) for x in c.get("in_distribution_values", ())))
            for c in d["ood_cases"])
    for k, v in d.items():
        if k in out or k in ("env", "train", "inference", "ood_cases"):
            continue
        out[k] = tuple(v) if isinstance(v, list) else v
    try:
        return replace(base, **out)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, preset_name: str | None = None) -> ExperimentConfig:
    """Read a TOML file over a preset. The file's own ``preset`` key wins over ``preset_name``."""
    if path is None:
        return preset(preset_name or "desk")
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    name = raw.get("preset", preset_name or "desk")
    return config_from_dict({**raw, "preset": name}, preset(name))


def config_hash(cfg: ExperimentConfig) -> str:
    text = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()
