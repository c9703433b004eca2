"""Run configuration: one JSON file with `model`, `train`, `sampler` and `data` sections plus `out_dir` and `seed`."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, TypeVar

from ..flow.errors import ConfigError
from ..flow.model import ModelConfig
from ..flow.sampler import SamplerConfig
from ..flow.sequence import DatasetSpec
from ..flow.training import TrainConfig

SectionT = TypeVar("SectionT")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model.latent_shape != tuple(self.data.latent_shape):
            raise ConfigError(
                f"model latent_shape {self.model.latent_shape} differs from data latent_shape {self.data.latent_shape}"
            )
        if self.data.num_classes > self.model.num_classes:
            raise ConfigError(f"data has {self.data.num_classes} classes but the model only {self.model.num_classes}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    def resolve(self, path: str | Path) -> Path:
        """Relative paths live under `out_dir`."""
        candidate = Path(path)
        return candidate if candidate.is_absolute() else self.out_path / candidate


SECTIONS: dict[str, type] = {"model": ModelConfig, "train": TrainConfig, "sampler": SamplerConfig, "data": DatasetSpec}


def build_section(cls: type[SectionT], values: dict[str, Any], section: str) -> SectionT:
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}  # type: ignore
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section '{section}': {unknown}")
    converted = {key: tuple(value) if isinstance(value, list) else value for key, value in values.items()}
    try:
        return cls(**converted)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"invalid value in section '{section}': {err}") from err


def config_from_dict(payload: dict[str, Any]) -> RunConfig:
    unknown = sorted(set(payload) - set(SECTIONS) - {"out_dir", "seed"})
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    sections = {name: build_section(cls, payload.get(name, {}), name) for name, cls in SECTIONS.items()}
    seed = payload.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    return RunConfig(**sections, out_dir=str(payload.get("out_dir", "runs/default")), seed=seed)


def config_to_dict(config: RunConfig) -> dict[str, Any]:
    return dataclasses.asdict(config)


def load_run_config(path: Optional[Path | str]) -> RunConfig:
    """Defaults when `path` is None."""
    if path is None:
        return RunConfig()
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file {path} does not exist") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
    if not isinstance(payload, dict):
        raise ConfigError("config file must hold a JSON object")
    return config_from_dict(payload)


def apply_overrides(
    config: RunConfig,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
    threads: Optional[int] = None,
) -> RunConfig:
    """Command-line flags win over file values; `seed` sets both the run seed and the training seed."""
    if seed is not None:
        config = replace(config, seed=seed, train=replace(config.train, seed=seed))
    if out_dir is not None:
        config = replace(config, out_dir=out_dir)
    if threads is not None:
        config = replace(config, train=replace(config.train, threads=threads))
    return config
