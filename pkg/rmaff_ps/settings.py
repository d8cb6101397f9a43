# -*- coding: UTF-8 -*-
"""
Configuration document
One JSON file, validated by pydantic, carrying render, network, training
and least-squares settings. Environment defaults come from config.py.
"""

import json
import logging
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import PS_PRECISION, PS_SEED

from .classic import L2Options
from .errors import ConfigError
from .render import SceneSpec

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1

Precision = Literal["f32", "f64"]
Variant = Literal["full", "no_rmaff", "single_rmaff", "no_attention"]
VARIANTS = ("full", "no_rmaff", "single_rmaff", "no_attention")


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_channels: Literal[1, 3] = 3
    c_shallow: int = Field(32, ge=1)
    c_deep: int = Field(64, ge=1)
    c_branch: int = Field(16, ge=1)
    c_fused: int = Field(128, ge=1)
    attention_reduction: int = Field(4, ge=1)
    spatial_kernel: int = Field(7, ge=1)
    dense_layers: int = Field(4, ge=1)
    dense_growth: int = Field(16, ge=1)
    leaky_slope: float = Field(0.1, ge=0.0)
    variant: Variant = "full"
    downsample: Literal["conv", "pool"] = "conv"
    rmaff_placement: Literal["per_branch", "post_concat"] = "per_branch"
    regressor: Literal["dense", "plain", "residual"] = "dense"
    precision: Precision = PS_PRECISION

    @field_validator("spatial_kernel")
    @classmethod
    def _odd_kernel(cls, value):
        if value % 2 == 0:
            raise ValueError("spatial_kernel must be odd")
        return value

    @model_validator(mode="after")
    def _reduction_fits(self):
        width = 4 * self.c_branch
        if self.attention_reduction > width or width % self.attention_reduction:
            raise ValueError(
                "attention_reduction {} must divide the branch concatenation width {}".format(self.attention_reduction, width)
            )
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr0: float = Field(0.001, ge=0.0)
    halve_every: int = Field(5, ge=1)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=1)
    batches_per_epoch: Optional[int] = Field(None, ge=1)
    patch: int = Field(32, ge=4)
    lights_per_sample: int = Field(32, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    val_fraction: float = Field(0.01, ge=0.0, lt=1.0)
    prefetch: bool = True
    seed: int = PS_SEED
    precision: Precision = PS_PRECISION


class LightsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["hemisphere", "ring"] = "hemisphere"
    count: int = Field(32, ge=1)
    max_zenith_deg: float = Field(60.0, gt=0.0, lt=90.0)
    zenith_deg: float = Field(45.0, gt=0.0, lt=90.0)
    intensity_range: List[float] = Field(default_factory=lambda: [1.0, 1.0], min_length=2, max_length=2)


class RenderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenes: List[SceneSpec] = Field(default_factory=list)
    random_scenes: int = Field(50, ge=0)
    width: int = Field(64, ge=4)
    height: int = Field(64, ge=4)
    channels: Literal[1, 3] = 3
    noise_sigma: float = Field(0.01, ge=0.0)
    cast_shadows: bool = True
    specular_probability: float = Field(0.5, ge=0.0, le=1.0)
    lights: LightsConfig = Field(default_factory=LightsConfig)


class ToolkitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config_version: int = CONFIG_VERSION
    seed: int = PS_SEED
    render: RenderConfig = Field(default_factory=RenderConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    l2: L2Options = Field(default_factory=L2Options)

    @field_validator("config_version")
    @classmethod
    def _known_version(cls, value):
        if value != CONFIG_VERSION:
            raise ValueError("unsupported config_version {} (expected {})".format(value, CONFIG_VERSION))
        return value


def load_config(path: Optional[Union[str, Path]] = None) -> ToolkitConfig:
    """Read and validate a config document; no path means built-in defaults"""
    if path is None:
        return ToolkitConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("Cannot read config {}: {}".format(path, e)) from e
    try:
        cfg = ToolkitConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError("Invalid config {}: {}".format(path, e)) from e
    logger.info("Loaded config %s", path)
    return cfg


def save_config(cfg: ToolkitConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(cfg.model_dump_json(indent=2) + "\n", encoding="utf-8")


def config_schema() -> str:
    return json.dumps(ToolkitConfig.model_json_schema(), indent=2)


def tiny_config() -> ToolkitConfig:
    """Smallest sensible network, double precision; used by gradient checks and tests"""
    return ToolkitConfig(
        network=NetworkConfig(
            c_shallow=4,
            c_deep=4,
            c_branch=4,
            c_fused=8,
            attention_reduction=4,
            spatial_kernel=3,
            dense_layers=2,
            dense_growth=4,
            precision="f64",
        ),
        train=TrainConfig(epochs=2, batch_size=2, patch=8, lights_per_sample=4, precision="f64"),
        render=RenderConfig(random_scenes=4, width=16, height=16, lights=LightsConfig(count=8)),
    )
