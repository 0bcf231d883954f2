"""TOML run configuration: one section per module, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .envsim import TASKS, ArmConfig, NoiseConfig, RandomizationConfig, RewardWeights
from .explore import ExploreConfig
from .nn_core import ConfigurationError
from .pidm import PidmArch, PretrainConfig
from .ppo import PpoConfig
from .probe import ProbeConfig
from .warmstart import INIT_MODES, WarmstartArch, normalize_mode


@dataclass
class TaskSection:
    name: str = "reach"


@dataclass
class WarmstartSection:
    init: str = "pretrained_both"
    pidm_checkpoint: str = ""
    intention_hidden: tuple = WarmstartArch.intention_hidden
    synthesizer_hidden: tuple = WarmstartArch.synthesizer_hidden
    vanilla_hidden: tuple = WarmstartArch.vanilla_hidden

    def arch(self) -> WarmstartArch:
        return WarmstartArch(tuple(self.intention_hidden), tuple(self.synthesizer_hidden),
                             tuple(self.vanilla_hidden))


@dataclass
class MetricsSection:
    tail: int = 50
    smoothing: int = 10


@dataclass
class BenchSection:
    tasks: tuple = ("reach", "track", "posture")
    methods: tuple = ("vanilla_mlp", "random_pidm", "pretrained_both")
    seeds: tuple = (0, 1, 2, 3, 4)


SECTIONS = {
    "arm": ArmConfig,
    "randomization": RandomizationConfig,
    "noise": NoiseConfig,
    "rewards": RewardWeights,
    "task": TaskSection,
    "ppo": PpoConfig,
    "explore": ExploreConfig,
    "pidm": PidmArch,
    "pretrain": PretrainConfig,
    "warmstart": WarmstartSection,
    "probe": ProbeConfig,
    "metrics": MetricsSection,
    "bench": BenchSection,
}
TOP_LEVEL = ("seed", "output_dir")


@dataclass
class RunConfig:
    seed: int
    output_dir: str = ""
    sections: dict = field(default_factory=dict)

    def __getattr__(self, name):
        secs = self.__dict__.get("sections", {})
        if name in secs:
            return secs[name]
        raise AttributeError(name)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "output_dir": self.output_dir}
        for name, sec in self.sections.items():
            out[name] = {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in dataclasses.asdict(sec).items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(cls, name: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    kw = {}
    defaults = cls()
    for k, v in values.items():
        default = getattr(defaults, k)
        if isinstance(default, tuple):
            if not isinstance(v, list):
                raise ConfigurationError(f"[{name}].{k} must be an array")
            v = tuple(v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigurationError(f"[{name}].{k} must be a boolean")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigurationError(f"[{name}].{k} must be a number")
            v = float(v)
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigurationError(f"[{name}].{k} must be an integer")
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigurationError(f"[{name}].{k} must be a string")
        kw[k] = v
    return dataclasses.replace(defaults, **kw)


def from_dict(data: dict) -> RunConfig:
    unknown = sorted(k for k in data if k not in TOP_LEVEL and k not in SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "seed" not in data:
        raise ConfigurationError("missing required key: seed")
    seed = data["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigurationError("seed must be a non-negative integer")
    sections = {name: _coerce(cls, name, data.get(name, {})) for name, cls in SECTIONS.items()}
    cfg = RunConfig(seed=seed, output_dir=str(data.get("output_dir", "")), sections=sections)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.task.name not in TASKS or cfg.task.name == "free":
        raise ConfigurationError("[task].name must be one of reach, track, posture")
    cfg.warmstart.init = normalize_mode(cfg.warmstart.init)
    for m in cfg.bench.methods:
        normalize_mode(m)
    for t in cfg.bench.tasks:
        if t not in TASKS or t == "free":
            raise ConfigurationError(f"unknown bench task {t!r}")
    cfg.ppo.validate()
    cfg.explore.validate()
    cfg.probe.validate()
    if cfg.metrics.tail < 1 or cfg.metrics.smoothing < 1:
        raise ConfigurationError("metrics tail and smoothing must be >= 1")


def load(path) -> RunConfig:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"{path}: invalid TOML ({e})") from None
    return from_dict(data)


def default(seed: int = 0, **overrides) -> RunConfig:
    """Defaults merged with ``overrides`` given as ``section={key: value}`` dicts."""
    data = {"seed": seed}
    data.update(overrides)
    return from_dict(data)


__all__ = ["RunConfig", "SECTIONS", "load", "from_dict", "default", "INIT_MODES"]
