"""JSON run configuration.

Schema (every key optional; unknown keys are rejected)::

    {
      "seed": 0,
      "sampler":  {"r_min", "r_max", "overlap_iou", "weight_cap", "category_penalty",
                   "boxes_per_image_target"},
      "refine":   {"merge_box_iou", "merge_area_ratio", "merge_mask_iou",
                   "split_coverage", "split_area_ratio"},
      "qc":       {"iou_coefficient", "threshold_start", "threshold_step",
                   "threshold_floor", "min_annotations"},
      "eval":     {"thresholds", "small_fraction", "large_fraction", "many_count",
                   "freq_top", "freq_mid"},
      "model":    {ModelConfig fields except "seed", plus "channel_scale",
                   "substitute_threshold"},
      "train":    {TrainConfig fields except "seed"},
      "stuff_categories": [...],
      "stuff_list_path": null
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .builder import RefineParams, SamplerParams, SubsetParams
from .model.network import MODULES
from .model.train import TrainConfig
from .qc import QcParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSection:
    thresholds: tuple[float, ...] = (0.5, 0.7, 0.9)
    small_fraction: float = 0.02
    large_fraction: float = 0.2
    many_count: int = 5
    freq_top: int = 100
    freq_mid: int = 500

    def subset_params(self) -> SubsetParams:
        return SubsetParams(self.small_fraction, self.large_fraction, self.many_count, self.freq_top, self.freq_mid)


@dataclass(frozen=True)
class ModelSection:
    n_categories: int = 0
    n_attributes: int = 0
    embed_dim: int = 64
    hidden_dim: int = 64
    ensemble_hidden: int = 64
    relation_grid: int = 32
    relation_channels: int = 8
    kernel_size: int = 7
    dilation: int = 2
    dropout: float = 0.1
    norm_eps: float = 1e-5
    positive_weight_cap: float = 20.0
    modules: tuple[str, ...] = MODULES
    # image side / channel side
    channel_scale: int = 4
    substitute_threshold: float = 0.5


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    pretrain_epochs: int = 5
    joint_epochs: int = 20
    grad_clip: float = 0.0


@dataclass(frozen=True)
class SamplerSection:
    r_min: float = 0.02
    r_max: float = 0.9
    overlap_iou: float = 0.2
    weight_cap: float = 0.1
    category_penalty: float = 5.0
    boxes_per_image_target: int = 5


@dataclass(frozen=True)
class Config:
    seed: int = 0
    sampler: SamplerSection = field(default_factory=SamplerSection)
    refine: RefineParams = field(default_factory=RefineParams)
    qc: QcParams = field(default_factory=QcParams)
    eval: EvalSection = field(default_factory=EvalSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    stuff_categories: tuple[str, ...] = ("sky", "grass", "water", "road", "snow", "sand", "wall", "floor", "ground")
    stuff_list_path: str | None = None

    def sampler_params(self) -> SamplerParams:
        return SamplerParams(**dataclasses.asdict(self.sampler), rng_seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self.train), seed=self.seed)

    def stuff_list(self) -> tuple[str, ...]:
        if self.stuff_list_path:
            lines = Path(self.stuff_list_path).read_text(encoding="utf-8").splitlines()
            return tuple(s.strip() for s in lines if s.strip())
        return self.stuff_categories

    def to_json(self) -> dict:
        return _jsonable(dataclasses.asdict(self))


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    return value


def _build(cls, data: dict, where: str, overrides: list[str]):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in fields:
            raise ConfigError(f"unknown config key {path!r}")
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, path, overrides)
        else:
            kwargs[key] = _coerce(value, default, path) if default is not None else value
            overrides.append(path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def load_config(path: str | Path | None = None, seed: int | None = None) -> tuple[Config, list[str]]:
    """Parse a config file (or defaults) and apply a command-line seed override.

    Returns the config and the dotted keys that were overridden.
    """
    overrides: list[str] = []
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    cfg = _build(Config, data, "", overrides)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
        if "seed" not in overrides:
            overrides.append("seed")
    return cfg, overrides
