"""Experiment configuration: one JSON document drives every pipeline stage.

A config bundles the corpus generator, clustering, episode, optimizer,
model and evaluation settings plus one master seed from which all stage
seeds are derived, so a single (config, seed) pair pins down every random
decision in a run. Files are versioned; unknown keys are rejected to keep
typos loud.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .episodes import EpisodeConfig, GeneratorSpec
from .errors import ConfigError
from .meta import MODE_PROMPTS, HyperParams

CONFIG_VERSION = 1

MODES = tuple(sorted(MODE_PROMPTS))


@dataclass(frozen=True)
class ClusteringConfig:
    k_topics: int = 5
    n_domains: int = 3
    target_dim: int = 8

    def validate(self) -> None:
        if self.k_topics < 1 or self.n_domains < 1 or self.target_dim < 1:
            raise ConfigError("clustering: k_topics, n_domains, target_dim must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "joint"
    tau: float = 0.07

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"model: mode must be one of {MODES}, got {self.mode!r}")
        if self.tau <= 0:
            raise ConfigError(f"model: tau must be > 0, got {self.tau}")

    def prompt_counts(self) -> tuple[int, int]:
        return MODE_PROMPTS[self.mode]


@dataclass(frozen=True)
class EvalConfig:
    base_fraction: float = 0.6
    shots: int = 16
    n_seeds: int = 5
    adapt_steps: int = 12
    adapt_alpha: float | None = None  # falls back to hyper.alpha
    # draw each class's shots from one random domain, mirroring the biased
    # support sets the regulator is trained against
    shot_domain_bias: bool = True
    # per-seed metrics average over this many independent shot draws
    shot_draws: int = 3

    def validate(self) -> None:
        if not 0.0 < self.base_fraction < 1.0:
            raise ConfigError("eval: base_fraction must be in (0, 1)")
        if self.shots < 1 or self.n_seeds < 1 or self.adapt_steps < 0:
            raise ConfigError("eval: shots, n_seeds must be >= 1 and adapt_steps >= 0")
        if self.adapt_alpha is not None and self.adapt_alpha < 0:
            raise ConfigError("eval: adapt_alpha must be >= 0")
        if self.shot_draws < 1:
            raise ConfigError("eval: shot_draws must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    no_domain_shift: bool = False
    no_regulator: bool = False
    prompt_pretrain_baseline: bool = False

    def validate(self) -> None:
        self.generator.validate()
        self.clustering.validate()
        self.episodes.validate()
        self.hyper.validate()
        self.model.validate()
        self.eval.validate()
        if self.clustering.target_dim > self.generator.embed_dim:
            raise ConfigError("clustering: target_dim exceeds generator embed_dim")

    # effective episode settings under the ablation flags
    def effective_episodes(self) -> EpisodeConfig:
        if self.no_domain_shift:
            return dataclasses.replace(self.episodes, shift_mode="uniform")
        return self.episodes

    def regulator_active(self) -> bool:
        return self.hyper.regulator_enabled and not self.no_regulator

    def adapt_alpha(self) -> float:
        return self.eval.adapt_alpha if self.eval.adapt_alpha is not None else self.hyper.alpha

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)


_SECTIONS = {
    "generator": GeneratorSpec,
    "clustering": ClusteringConfig,
    "episodes": EpisodeConfig,
    "hyper": HyperParams,
    "model": ModelConfig,
    "eval": EvalConfig,
}


def config_to_payload(config: ExperimentConfig) -> dict[str, Any]:
    payload: dict[str, Any] = {"version": CONFIG_VERSION, "seed": config.seed}
    for name in _SECTIONS:
        payload[name] = dataclasses.asdict(getattr(config, name))
    payload["no_domain_shift"] = config.no_domain_shift
    payload["no_regulator"] = config.no_regulator
    payload["prompt_pretrain_baseline"] = config.prompt_pretrain_baseline
    return payload


def _build_section(name: str, cls, data: Any):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"config section {name!r} has unknown keys: {sorted(unknown)}")
    return cls(**data)


def config_from_payload(payload: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(payload)
    version = data.pop("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}, expected {CONFIG_VERSION}")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(name, cls, data.pop(name))
    for flag in ("seed", "no_domain_shift", "no_regulator", "prompt_pretrain_baseline"):
        if flag in data:
            kwargs[flag] = data.pop(flag)
    if data:
        raise ConfigError(f"config has unknown keys: {sorted(data)}")
    config = ExperimentConfig(**kwargs)
    config.validate()
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
    return config_from_payload(payload)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_payload(config), indent=2) + "\n")
