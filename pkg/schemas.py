import math
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from config import MASK_NEG
from models import CoordinateFrame, NonlinearKind, OptimizerKind, RpeMode, YawMode

VALID_VERTEX_COUNTS = (1, 2, 4, 8)


# ============== RUN CONFIGURATION ==============

class DetectorConfig(BaseModel):
    """Architecture and attention-modulation settings of the toy detector."""
    d_model: int = Field(64, gt=0)
    heads: int = Field(4, gt=0)
    queries: int = Field(32, gt=0)
    layers: int = Field(3, ge=0)
    seeds: int = Field(256, gt=0)  # N' encoder seeds
    knn: int = Field(16, gt=0)  # raw points pooled per seed
    ffn_hidden: int = Field(128, gt=0)
    rpe_hidden: int = Field(32, gt=0)  # d_hidden of each vertex MLP
    n_classes: int = Field(4, gt=0)
    angle_bins: int = Field(12, gt=0)

    rpe_mode: RpeMode = RpeMode.EXACT
    nonlinear: NonlinearKind = NonlinearKind.SIGNED_LOG
    vertex_count: int = 8
    frame: CoordinateFrame = CoordinateFrame.CANONICAL
    table_res: int = Field(10, ge=2)
    table_extent: Optional[float] = None  # F-space half range; None means F(10 m) for `nonlinear`
    mask_neg: float = MASK_NEG

    yaw_mode: YawMode = YawMode.ZERO
    object_normalized: bool = True
    initial_ffn: bool = True
    init_candidates: Optional[int] = None  # defaults to queries
    seed: int = 0

    @field_validator("vertex_count")
    @classmethod
    def check_vertex_count(cls, v):
        if v not in VALID_VERTEX_COUNTS:
            raise ValueError(f"vertex_count must be one of {VALID_VERTEX_COUNTS}, got {v}")
        return v

    @field_validator("table_extent")
    @classmethod
    def check_extent(cls, v):
        if v is not None and not v > 0:
            raise ValueError(f"table_extent must be positive, got {v}")
        return v

    @field_validator("mask_neg")
    @classmethod
    def check_mask_neg(cls, v):
        if not (math.isfinite(v) and v < 0):
            raise ValueError(f"mask_neg must be a finite negative number, got {v}")
        return v

    @model_validator(mode="after")
    def check_shapes(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.init_candidates is not None and self.init_candidates < self.queries:
            raise ValueError(
                f"init_candidates ({self.init_candidates}) must be >= queries ({self.queries})"
            )
        if self.queries > self.seeds:
            raise ValueError(f"queries ({self.queries}) cannot exceed seeds ({self.seeds})")
        if self.candidates > self.seeds:
            raise ValueError(f"init_candidates ({self.candidates}) cannot exceed seeds ({self.seeds})")
        return self

    @property
    def candidates(self) -> int:
        return self.init_candidates or self.queries

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


class LossWeightsConfig(BaseModel):
    """lambda_1..lambda_6 and the focal/huber constants."""
    giou: float = Field(2.0, ge=0)
    center: float = Field(5.0, ge=0)
    size: float = Field(1.0, ge=0)
    focal: float = Field(1.0, ge=0)
    angle_residual: float = Field(1.0, ge=0)
    angle_class: float = Field(0.1, ge=0)
    focal_alpha: float = Field(0.25, gt=0, lt=1)
    focal_gamma: float = Field(2.0, ge=0)
    huber_delta: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def check_any_positive(self):
        weights = (self.giou, self.center, self.size, self.focal, self.angle_residual, self.angle_class)
        if not any(w > 0 for w in weights):
            raise ValueError("at least one loss weight must be positive")
        return self

    def scaled(self, factor: float) -> "LossWeightsConfig":
        return self.model_copy(update={
            "giou": self.giou * factor,
            "center": self.center * factor,
            "size": self.size * factor,
            "focal": self.focal * factor,
            "angle_residual": self.angle_residual * factor,
            "angle_class": self.angle_class * factor,
        })

    def for_yaw_mode(self, yaw_mode: YawMode) -> "LossWeightsConfig":
        if yaw_mode == YawMode.ZERO:
            return self.model_copy(update={"angle_residual": 0.0, "angle_class": 0.0})
        return self


class TrainConfig(BaseModel):
    epochs: int = Field(20, ge=0)
    lr: float = Field(0.01, gt=0)
    min_lr: float = Field(1e-6, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    optimizer: OptimizerKind = OptimizerKind.SGD
    warmup_fraction: float = Field(0.05, ge=0, lt=1)
    clip_norm: float = Field(0.1, gt=0)
    repeat_gt: int = Field(1, ge=1)
    batch_size: int = Field(1, ge=1)
    augment: bool = False
    seed: int = 0
    threads: int = Field(1, ge=1)


class GenConfig(BaseModel):
    scenes: int = Field(10, ge=0)
    seed: int = 0
    yaw: YawMode = YawMode.ZERO
    points: int = Field(2048, gt=0)
    boxes_min: int = Field(2, ge=1)
    boxes_max: int = Field(6, ge=1)
    clutter: float = Field(0.2, ge=0, le=1)
    room_size: List[float] = Field(default_factory=lambda: [8.0, 8.0, 3.0], min_length=3, max_length=3)
    n_classes: int = Field(4, gt=0)
    max_retries: int = Field(200, gt=0)

    @model_validator(mode="after")
    def check_ranges(self):
        if self.boxes_min > self.boxes_max:
            raise ValueError(f"boxes_min ({self.boxes_min}) > boxes_max ({self.boxes_max})")
        if any(v <= 0 for v in self.room_size):
            raise ValueError(f"room_size must be positive, got {self.room_size}")
        return self


# ============== FILE FORMATS ==============

class BoxRecord(BaseModel):
    center: List[float] = Field(min_length=3, max_length=3)
    size: List[float] = Field(min_length=3, max_length=3)
    yaw: float = 0.0
    class_id: int = Field(alias="class", ge=0)

    class Config:
        populate_by_name = True
        extra = "forbid"


class SceneFile(BaseModel):
    """Scene JSON: points as [x, y, z, r, g, b] rows, boxes, and the generator seed."""
    points: List[List[float]]
    boxes: List[BoxRecord] = []
    seed: int
    scene_id: Optional[str] = None

    class Config:
        extra = "forbid"

    @field_validator("points")
    @classmethod
    def check_rows(cls, rows):
        for i, row in enumerate(rows):
            if len(row) != 6:
                raise ValueError(f"point row {i} has {len(row)} values, expected 6")
        return rows


class DetectionRecord(BoxRecord):
    score: float


class SceneDetections(BaseModel):
    scene_id: str
    boxes: List[DetectionRecord] = []


class DetectionFile(BaseModel):
    scenes: List[SceneDetections] = []


class ParameterRecord(BaseModel):
    name: str
    shape: List[int]


class CheckpointManifest(BaseModel):
    format: str = "VDT1"
    parameters: List[ParameterRecord]
    config: DetectorConfig
    epochs_trained: int = 0


class MetricsReport(BaseModel):
    n_scenes: int
    ap25: Dict[str, float]
    ap50: Dict[str, float]
    map25: float
    map50: float
    locality: Dict[str, Optional[float]] = {}
