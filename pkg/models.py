import enum
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from errors import GeometryError


class NonlinearKind(str, enum.Enum):
    IDENTITY = "identity"
    SOFT_SIGN = "soft_sign"
    TANH = "tanh"
    INV_SQRT = "inv_sqrt"
    SIGNED_LOG = "signed_log"
    DEFAULT = "signed_log"


class RpeMode(str, enum.Enum):
    NONE = "none"
    MASK = "mask"
    EXACT = "exact"
    TABLE = "table"
    MASK_EXACT = "mask+exact"
    MASK_TABLE = "mask+table"

    @property
    def uses_mask(self) -> bool:
        return self in (RpeMode.MASK, RpeMode.MASK_EXACT, RpeMode.MASK_TABLE)

    @property
    def uses_vertex_mlps(self) -> bool:
        return self in (RpeMode.EXACT, RpeMode.TABLE, RpeMode.MASK_EXACT, RpeMode.MASK_TABLE)

    @property
    def uses_table(self) -> bool:
        return self in (RpeMode.TABLE, RpeMode.MASK_TABLE)


class YawMode(str, enum.Enum):
    ZERO = "zero"  # axis-aligned scenes, yaw never predicted
    FREE = "free"


class CoordinateFrame(str, enum.Enum):
    CANONICAL = "canonical"
    WORLD = "world"


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    ADAMW = "adamw"


def normalize_yaw(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(float(theta), 2.0 * math.pi)
    if r <= -math.pi:
        return math.pi
    return r


@dataclass(frozen=True)
class RotatedBox3:
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]  # full extents (w, l, h)
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise GeometryError(f"box needs 3 center and 3 size components, got {center} / {size}")
        if not all(s > 0.0 and math.isfinite(s) for s in size):
            raise GeometryError(f"box size must be positive and finite, got {size}")
        if not all(math.isfinite(c) for c in center) or not math.isfinite(self.yaw):
            raise GeometryError(f"box center/yaw must be finite, got {center} / {self.yaw}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)

    @property
    def size_array(self) -> np.ndarray:
        return np.asarray(self.size, dtype=np.float64)

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    def as_array(self) -> np.ndarray:
        """(x, y, z, w, l, h, yaw)"""
        return np.array([*self.center, *self.size, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "RotatedBox3":
        values = [float(v) for v in values]
        return cls(center=tuple(values[0:3]), size=tuple(values[3:6]), yaw=values[6])


@dataclass
class PointSet:
    coords: np.ndarray  # N x 3 meters
    colors: Optional[np.ndarray] = None  # N x 3 in [0, 1]

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if self.colors.shape[0] != self.coords.shape[0]:
                raise GeometryError(
                    f"colors {self.colors.shape} do not match coords {self.coords.shape}"
                )
        if not np.all(np.isfinite(self.coords)):
            raise GeometryError("point coordinates must be finite")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def features(self) -> np.ndarray:
        """N x 6 (xyz, rgb); missing colors read as mid-grey."""
        colors = self.colors if self.colors is not None else np.full_like(self.coords, 0.5)
        return np.concatenate([self.coords, colors], axis=1)


@dataclass(frozen=True)
class LabeledBox:
    box: RotatedBox3
    class_id: int


@dataclass
class SceneSample:
    points: PointSet
    gt_boxes: List[LabeledBox]
    scene_id: str
    seed: int


@dataclass(frozen=True)
class Detection:
    box: RotatedBox3
    class_id: int
    score: float


@dataclass
class DetectionSet:
    scene_id: str
    detections: List[Detection] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.detections)
