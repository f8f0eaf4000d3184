"""Run configuration. Absent fields take their defaults; unknown keys are rejected."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .errors import InvalidConfig
from .geom import GeoBounds

ALIGNMENT_MODES = ("fine_grain", "segment_based", "no_align")
MODALITY_MODES = ("full", "loc", "sv", "sv+loc", "traj+loc")

# blocks fed to the fine-tuning head, in fused order
MODALITY_BLOCKS = {
    "full": ("image", "location", "trajectory"),
    "loc": ("location",),
    "sv": ("image",),
    "sv+loc": ("image", "location"),
    "traj+loc": ("location", "trajectory"),
}


class Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    d: int = 128
    S: int = 64
    lambda_min: float = 1.0
    lambda_max: float = math.sqrt(2.0)
    L: int = 240
    epsilon: float = 0.002
    tau: float = 0.07
    queue_capacity: int = 2048
    batch_tuples: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-4
    pretrain_epochs: int = 300
    finetune_epochs: int = 100
    head_hidden: int = 1024
    pretrain_svis_per_traj: int = 32
    finetune_trajs_per_anchor: int = 16
    time_mode: Literal["synthetic", "masked"] = "synthetic"
    alignment_mode: Literal["fine_grain", "segment_based", "no_align"] = "fine_grain"
    modality_mode: Literal["full", "loc", "sv", "sv+loc", "traj+loc"] = "full"
    seed: int = 0

    nif_layers: int = 4
    nif_heads: int = 8
    nif_ff: int = 512
    agg_heads: int = 8
    finetune_lr: float = 1e-4
    finetune_batch_anchors: int = 32
    train_fraction: float = 0.8
    relative_time: bool = True
    augment: bool = True
    backbone: Literal["patch", "features"] = "patch"
    quality_threshold: float = 0.8
    # [min_lat, min_lon, max_lat, max_lon]; unit square for synthetic data
    bounds: Optional[tuple[float, float, float, float]] = None

    @field_validator("epsilon", "tau", "lr", "finetune_lr")
    @classmethod
    def _positive(cls, v):
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @model_validator(mode="after")
    def _check(self):
        if self.d % self.nif_heads or self.d % self.agg_heads:
            raise ValueError("d must be divisible by the attention head counts")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.bounds is not None:
            GeoBounds(*self.bounds)
        return self

    @property
    def geo_bounds(self) -> GeoBounds | None:
        return GeoBounds(*self.bounds) if self.bounds is not None else None

    def echo(self) -> dict:
        return self.model_dump(mode="json")

    def replace(self, **changes) -> "Config":
        return make_config({**self.model_dump(), **changes})


def make_config(values: dict | None = None) -> Config:
    try:
        return Config(**(values or {}))
    except ValidationError as exc:
        raise InvalidConfig(str(exc)) from exc


def load_config(path: str | Path | None, **overrides) -> Config:
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        values = (json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)) or {}
        if not isinstance(values, dict):
            raise InvalidConfig(f"{path}: config must be a mapping")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return make_config(values)
