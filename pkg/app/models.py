from __future__ import annotations

import json
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError

SimilarityTerm = Literal["box", "contrastive", "semantic"]

DEFAULT_PROFILE = Path(__file__).parent / "config" / "run_defaults.json"


class RunState(str, Enum):
    IDLE = "IDLE"
    STREAMING = "STREAMING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


class CameraIntrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @model_validator(mode="after")
    def _check_ranges(self) -> CameraIntrinsics:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mask_threshold: float = 0.5
    prune_threshold: float = 1.75
    temperature: float = 0.02
    alpha: float = 0.5
    beta: float = 0.5
    nms_iou: float = 0.6
    depth_scale: float = 0.001
    seed: int = 0

    pooling: Literal["geometric", "average", "max"] = "geometric"
    normalization: Literal["scalar", "per_axis"] = "scalar"
    center: Literal["centroid", "box"] = "centroid"
    pool_divisor: Literal["count", "weight"] = "count"
    box_activation: Literal["relu", "softplus"] = "relu"
    confidence_fusion: Literal["max", "mean"] = "max"
    similarity_terms: tuple[SimilarityTerm, ...] = ("box", "contrastive", "semantic")

    sample_ratio: float = 1.0
    num_classes: int = 20
    channels: int = 32
    empty_ap: float = 1.0
    prefetch: int = 2
    weights_path: str | None = None

    @field_validator("mask_threshold")
    @classmethod
    def _open_unit(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError("must lie in (0, 1)")
        return value

    @field_validator("nms_iou", "sample_ratio")
    @classmethod
    def _half_open_unit(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("must lie in (0, 1]")
        return value

    @field_validator("temperature", "depth_scale")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("num_classes", "channels")
    @classmethod
    def _positive_int(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @field_validator("prefetch")
    @classmethod
    def _non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("must be non-negative")
        return value

    @field_validator("similarity_terms")
    @classmethod
    def _terms(cls, value: tuple[str, ...]) -> tuple[str, ...]:
        if not value or len(set(value)) != len(value):
            raise ValueError("need a non-empty set of distinct terms")
        return value

    @classmethod
    def create(cls, **values: Any) -> RunConfig:
        try:
            return cls(**values)
        except ValidationError as exc:
            raise ConfigurationError(f"invalid run config: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path = DEFAULT_PROFILE, /, **overrides: Any) -> RunConfig:
        """Profile values, then non-null ``overrides`` on top; the profile path is never an override."""
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        payload.update({key: value for key, value in overrides.items() if value is not None})
        return cls.create(**payload)

    def overrides(self) -> dict[str, Any]:
        defaults = RunConfig().model_dump(mode="json")
        current = self.model_dump(mode="json")
        return {key: value for key, value in current.items() if defaults[key] != value}


class RunEvent(BaseModel):
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    stage: str
    action: str
    details: dict[str, Any] = Field(default_factory=dict)


class FrameTiming(BaseModel):
    frame_index: int
    backbone_surrogate: float = 0.0
    decoder: float = 0.0
    similarity: float = 0.0
    matching: float = 0.0
    updating: float = 0.0
    total: float = 0.0

    @property
    def merging(self) -> float:
        return self.similarity + self.matching + self.updating


class InstanceSummary(BaseModel):
    instance_id: int
    n: int
    box: list[float]
    semantic_argmax: int
    confidence: float
    point_count: int
    point_ids: list[int]


class Provenance(BaseModel):
    config: dict[str, Any]
    overrides: dict[str, Any]
    weights: str | None = None


class MapExport(BaseModel):
    provenance: Provenance
    frames: int
    point_count: int
    instances: list[InstanceSummary] = Field(default_factory=list)


class PRCurve(BaseModel):
    precision: list[float] = Field(default_factory=list)
    recall: list[float] = Field(default_factory=list)


class EvalResult(BaseModel):
    ap: float
    ap50: float
    ap25: float
    curves: dict[str, PRCurve] = Field(default_factory=dict)


class BenchReport(BaseModel):
    prev: int
    cur: int
    channels: int
    repeats: int
    similarity_ms: float
    matching_ms: float
    updating_ms: float
    decoder_ms: float | None = None

    @property
    def merging_ms(self) -> float:
        return self.similarity_ms + self.matching_ms + self.updating_ms


class RunRequest(BaseModel):
    sequence_dir: str
    config: dict[str, Any] = Field(default_factory=dict)


class RunSummary(BaseModel):
    run_id: str
    state: RunState
    frames: int
    instances: int
    point_count: int
    mean_frame_ms: float = 0.0
