"""Run configuration: one JSON file drives every CLI command.

Loading is strict: unknown keys anywhere in the file are rejected. Command-line
flags override file values; the worker count may also come from the
``STRUCTNORM_WORKERS`` environment variable (flag > env > file).
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .asac import AsacConfig
from .network import NetworkConfig
from .preprocess import PreprocessConfig
from .training import FinetuneConfig, TrainConfig

WORKERS_ENV = "STRUCTNORM_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    dictionary: Optional[str] = None
    output: Optional[str] = None


@dataclass
class NetworkSection:
    """NetworkConfig minus the class count, which comes from the vocabulary."""

    stage_block_counts: tuple[int, int, int, int] = (3, 4, 6, 3)
    base_width: int = 64
    feature_dim: int = 256
    nonlocal_stages: tuple[int, ...] = (2, 3)
    channel_bottleneck_ratio: int = 2

    def __post_init__(self):
        self.stage_block_counts = tuple(self.stage_block_counts)
        self.nonlocal_stages = tuple(self.nonlocal_stages)

    def build(self, num_classes: int) -> NetworkConfig:
        return NetworkConfig(num_classes=num_classes, **dataclasses.asdict(self))


@dataclass
class PhantomSection:
    preset: str = "default"  # "default" (8 classes) or "transfer" (4 new organs)
    counts: Optional[list[int]] = None
    ratios: Optional[tuple[int, int, int]] = (3, 1, 1)
    overrides: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.ratios is not None:
            self.ratios = tuple(self.ratios)
        if self.preset not in ("default", "transfer"):
            raise ConfigError(f"unknown phantom preset {self.preset!r}")


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    asac: AsacConfig = field(default_factory=AsacConfig)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    threshold: float = 0.5
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_json(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = _build(hint, value, f"{where}.{key}" if where else key)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path=None, env: Optional[dict] = None) -> RunConfig:
    """Read ``path`` (or use defaults) and apply the worker-count environment override."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(data)
    env = os.environ if env is None else env
    if env.get(WORKERS_ENV):
        try:
            cfg.workers = int(env[WORKERS_ENV])
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
        cfg.__post_init__()
    return cfg


def with_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Apply dotted overrides such as ``{"train.lr0": 1e-3}``; ``None`` values are ignored."""
    data = cfg.to_json()
    for dotted, value in flags.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = value
    return config_from_dict(data)

