"""Experiment configuration: TOML for people, JSON for artifacts, one hash for both."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .episode import ALL_METHODS, EpisodeConfig, Method
from .mppi import PlannerConfig
from .sim import SimParams
from .world_model import EncoderSpec, PredictorSpec, RolloutConfig

CONFIG_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass
class WorldSection:
    seed: int = 0
    n_landmarks: int = 8
    arena_half_width: float = 10.0


@dataclass
class DatasetSection:
    seed: int = 1
    n_episodes: int = 200
    steps: int = 32
    noise_scale: float = 0.15


@dataclass
class EncoderSection:
    seed: int = 0
    n_tokens: int = 4
    token_dim: int = 16
    gain: float = 0.1


@dataclass
class PredictorSection:
    kind: str = "mlp"
    hidden: int = 128
    layers: int = 3
    action_embed: int = 16


@dataclass
class EvaluationSection:
    seed: int = 8
    n_episodes: int = 100
    max_steps: int = 25
    replan_interval: int = 1
    n_policy_samples: int = 4
    noise_scale: float = 0.1
    methods: List[str] = field(default_factory=lambda: [m.value for m in ALL_METHODS])


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: WorldSection = field(default_factory=WorldSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    # -- validation ---------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        try:
            if self.dataset.n_episodes < 1:
                raise ValueError("dataset.n_episodes must be >= 1")
            if self.dataset.steps < self.rollout.k_roll:
                raise ValueError("dataset.steps must be >= rollout.k_roll")
            if self.dataset.noise_scale < 0 or self.evaluation.noise_scale < 0:
                raise ValueError("noise_scale must be >= 0")
            if self.evaluation.n_episodes < 1:
                raise ValueError("evaluation.n_episodes must be >= 1")
            if self.world.n_landmarks < 4:
                raise ValueError("world.n_landmarks must be >= 4")
            if not self.evaluation.methods:
                raise ValueError("evaluation.methods must not be empty")
            for m in self.evaluation.methods:
                Method(m)
            if self.rollout.horizon != self.planner.horizon:
                raise ValueError("rollout.horizon and planner.horizon must agree")
            self.rollout.validate()
            PredictorSpec(self.encoder.n_tokens, self.encoder.token_dim, self.predictor.kind,
                          self.predictor.hidden, self.predictor.layers,
                          self.predictor.action_embed, self.rollout.context_window)
            self.episode_config().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    # -- derived objects ----------------------------------------------------

    def rng(self, *stream: int) -> np.random.Generator:
        """Independent generator for a named stream under the master seed."""
        return np.random.default_rng([self.seed, *stream])

    def world_seed(self) -> int:
        return int(np.random.SeedSequence([self.seed, self.world.seed]).generate_state(1)[0])

    def encoder_spec(self, obs_dim: int) -> EncoderSpec:
        e = self.encoder
        return EncoderSpec(obs_dim, e.n_tokens, e.token_dim, e.seed, e.gain)

    def predictor_spec(self) -> PredictorSpec:
        p = self.predictor
        return PredictorSpec(self.encoder.n_tokens, self.encoder.token_dim, p.kind, p.hidden,
                             p.layers, p.action_embed, self.rollout.context_window)

    def episode_config(self) -> EpisodeConfig:
        ev = self.evaluation
        return EpisodeConfig(ev.max_steps, ev.replan_interval, ev.n_policy_samples,
                             ev.noise_scale, dataclasses.replace(self.planner), SimParams())

    def methods(self) -> List[Method]:
        return [Method(m) for m in self.evaluation.methods]

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["format_version"] = CONFIG_FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("format_version", CONFIG_FORMAT_VERSION)
        if version != CONFIG_FORMAT_VERSION:
            raise ConfigError(f"unsupported config format_version {version}")
        sections = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            kind = sections[key].default_factory if isinstance(value, dict) else None
            kwargs[key] = _build(kind, value, key) if kind is not None else value
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _build(factory, value: dict, where: str):
    proto = factory()
    names = {f.name for f in fields(proto)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    try:
        return dataclasses.replace(proto, **value)
    except TypeError as e:
        raise ConfigError(f"[{where}]: {e}") from None


def load_config(path) -> ExperimentConfig:
    """Read a .toml or .json config and validate it."""
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return ExperimentConfig.from_dict(raw).validate()
