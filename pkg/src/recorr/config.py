"""JSON run configuration.

One document covers every module; unknown keys are rejected and the fully
resolved document (defaults filled in) is written next to every artifact.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class EncoderConfig(_Section):
    # ordered full resolution first: levels 4, 3, 2, 1, 0
    channels: List[int] = Field(default_factory=lambda: [8, 16, 16, 32, 32])

    @field_validator("channels")
    @classmethod
    def _check(cls, v):
        if len(v) != 5 or min(v) < 1:
            raise ValueError("expected five positive channel counts (full resolution first)")
        if any(c % 2 for c in v[1:]):
            raise ValueError("channels at scales 1/2..1/16 must be even (context split)")
        return v

    def level_channels(self, level: int) -> int:
        """Channels of pyramid level ``level`` (0 = 1/16, 4 = full)."""
        return self.channels[4 - level]


class SearchConfig(_Section):
    radius: int = 3
    temperature: float = 0.1
    # Gaussian sigma (voxels of the current scale) applied to direct-mode residuals
    direct_smoothing: float = Field(2.0, ge=0)

    @field_validator("radius")
    @classmethod
    def _odd(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("search radius (neighbourhood side) must be a positive odd integer")
        return v

    @field_validator("temperature")
    @classmethod
    def _pos(cls, v):
        if v <= 0:
            raise ValueError("temperature must be positive")
        return v


class UpdaterConfig(_Section):
    motion_channels: int = 16
    # derived from encoder.channels (half of each scale's fixed features);
    # accepted only when it agrees
    hidden_channels: Optional[List[int]] = None


class RefineConfig(_Section):
    channels: int = 8


class ScheduleConfig(_Section):
    iterations: List[int] = Field(default_factory=lambda: [3, 3, 2, 2])
    refine: bool = True

    @field_validator("iterations")
    @classmethod
    def _check(cls, v):
        if len(v) != 4 or min(v) < 0:
            raise ValueError("expected four non-negative iteration counts")
        if sum(v) < 1:
            raise ValueError("at least one iteration is required")
        return v


class LossConfig(_Section):
    similarity: Literal["mse", "ncc"] = "mse"
    lambda_: float = Field(0.02, alias="lambda", ge=0)
    gamma: float = Field(0.7, gt=0, le=1)
    supervision: Literal["full-sequence", "last-of-scale"] = "full-sequence"
    dice_weight: float = Field(0.0, ge=0)
    ncc_window: int = 9


class TrainConfig(_Section):
    lr: float = Field(0.0007, gt=0)
    weight_decay: float = Field(0.0004, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: Literal[1] = 1
    epochs: int = Field(50, ge=1)
    clip_norm: float = 1.0
    dtype: Literal["float32", "float64"] = "float32"


class PhantomConfig(_Section):
    labels: int = Field(4, ge=2, le=4)
    noise: float = 0.02
    texture: float = 0.15
    smoothing: float = 2.0


class PerturbConfig(_Section):
    kind: Literal["svf", "affine-offset", "affine-scale", "translation", "none"] = "svf"
    s: int = 4
    magnitude: float = 4.0
    translation: Optional[List[float]] = None


class DataConfig(_Section):
    n_train: int = 40
    n_val: int = 4
    n_test: int = 8
    dims: int = 32
    spacing: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    perturb: PerturbConfig = Field(default_factory=PerturbConfig)


class RunConfig(_Section):
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    mode: Literal["learned", "direct"] = "learned"
    variant: Literal["standard", "diffeo"] = "standard"
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)
    updater: UpdaterConfig = Field(default_factory=UpdaterConfig)
    refine: RefineConfig = Field(default_factory=RefineConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @model_validator(mode="after")
    def _consistency(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        derived = [self.encoder.level_channels(i) // 2 for i in range(4)]
        if self.updater.hidden_channels is not None and list(self.updater.hidden_channels) != derived:
            raise ValueError(f"updater.hidden_channels must equal half the encoder widths per scale: {derived}")
        self.updater.hidden_channels = derived
        return self

    def to_dict(self) -> dict:
        return self.model_dump(by_alias=True)


def parse_config(doc: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(doc or {})
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(err["msg"], key_path=path) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return parse_config(doc)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def describe_keys(model=RunConfig, prefix="") -> list[str]:
    """``key = default`` lines for every config key, nested keys dotted."""
    lines = []
    inst = model() if prefix == "" else None
    for name, info in model.model_fields.items():
        key = prefix + (info.alias or name)
        ann = info.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            lines.extend(describe_keys(ann, key + "."))
            continue
        default = info.get_default(call_default_factory=True)
        if inst is not None:
            default = getattr(inst, name)
        lines.append(f"{key} = {json.dumps(default)}")
    return lines
