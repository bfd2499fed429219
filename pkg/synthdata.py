"""
Synthetic indoor scenes: boxes resting on the floor of a room, observed as points
sampled on their surfaces, plus uniform clutter. Class id is a shape archetype, so the
label is learnable from geometry alone.
"""
import json
import math
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from errors import GeometryError, SceneFormatError, SceneGenerationError
from geometry import iou_rotated
from models import LabeledBox, PointSet, RotatedBox3, SceneSample, YawMode
from observability import get_logger
from schemas import BoxRecord, GenConfig, SceneFile

logger = get_logger("synthdata")

MIN_SURFACE_POINTS = 32
MAX_PAIR_IOU = 0.05

# (w range, l range, h range) in meters, and a base color
ARCHETYPES = [
    (((1.0, 1.6), (1.0, 1.6), (0.6, 0.9)), (0.55, 0.35, 0.2)),   # table: square, low
    (((0.4, 0.7), (0.4, 0.7), (1.4, 2.0)), (0.3, 0.3, 0.7)),     # cabinet: narrow, tall
    (((1.7, 2.4), (0.7, 1.0), (0.6, 0.9)), (0.7, 0.2, 0.2)),     # sofa: elongated
    (((0.3, 0.5), (0.3, 0.5), (0.3, 0.5)), (0.2, 0.6, 0.3)),     # crate: small cube
]


def archetype_size(class_id: int, rng: np.random.Generator) -> np.ndarray:
    ranges, _ = ARCHETYPES[class_id % len(ARCHETYPES)]
    scale = 1.0 + 0.5 * (class_id // len(ARCHETYPES))
    return np.array([rng.uniform(lo, hi) for lo, hi in ranges]) * scale


def _place_boxes(rng: np.random.Generator, config: GenConfig) -> List[LabeledBox]:
    room = np.asarray(config.room_size, dtype=np.float64)
    n_boxes = int(rng.integers(config.boxes_min, config.boxes_max + 1))
    placed: List[LabeledBox] = []
    for _ in range(n_boxes):
        for _attempt in range(config.max_retries):
            class_id = int(rng.integers(0, config.n_classes))
            size = archetype_size(class_id, rng)
            size[2] = min(size[2], room[2])
            yaw = float(rng.uniform(-math.pi, math.pi)) if config.yaw == YawMode.FREE else 0.0
            margin = 0.5 * math.hypot(size[0], size[1])
            if 2 * margin >= min(room[0], room[1]):
                continue
            x = rng.uniform(margin, room[0] - margin)
            y = rng.uniform(margin, room[1] - margin)
            box = RotatedBox3((x, y, 0.5 * size[2]), tuple(size), yaw)
            if all(iou_rotated(box, other.box) <= MAX_PAIR_IOU for other in placed):
                placed.append(LabeledBox(box, class_id))
                break
        else:
            raise SceneGenerationError(
                f"could not place box {len(placed) + 1} of {n_boxes} after {config.max_retries} attempts"
            )
    return placed


def sample_surface(box: RotatedBox3, count: int, rng: np.random.Generator) -> np.ndarray:
    """`count` points uniform on the six faces, faces picked in proportion to their area."""
    w, l, h = box.size
    areas = np.array([l * h, l * h, w * h, w * h, w * l, w * l])
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    local = rng.uniform(-0.5, 0.5, size=(count, 3)) * np.array([w, l, h])
    axis = faces // 2
    sign = np.where(faces % 2 == 0, -0.5, 0.5)
    half = np.array([w, l, h])
    local[np.arange(count), axis] = sign * half[axis]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center_array


def generate_scene(seed: int, config: Optional[GenConfig] = None,
                   scene_id: Optional[str] = None) -> SceneSample:
    config = config or GenConfig()
    rng = np.random.default_rng(seed)
    boxes = _place_boxes(rng, config)
    room = np.asarray(config.room_size, dtype=np.float64)

    n_clutter = int(round(config.clutter * config.points))
    coords, colors = [], []
    if config.clutter < 1.0 and boxes:
        n_surface = config.points - n_clutter
        areas = np.array([2 * (b.box.size[0] * b.box.size[1] + b.box.size[0] * b.box.size[2]
                               + b.box.size[1] * b.box.size[2]) for b in boxes])
        counts = np.maximum(MIN_SURFACE_POINTS, np.floor(n_surface * areas / areas.sum()).astype(int))
        n_clutter = max(0, config.points - int(counts.sum()))
        for labeled, count in zip(boxes, counts):
            coords.append(sample_surface(labeled.box, int(count), rng))
            _, base = ARCHETYPES[labeled.class_id % len(ARCHETYPES)]
            colors.append(np.clip(np.asarray(base) + rng.normal(0.0, 0.05, size=(count, 3)), 0.0, 1.0))
    if n_clutter > 0:
        coords.append(rng.uniform(0.0, 1.0, size=(n_clutter, 3)) * room)
        colors.append(rng.uniform(0.3, 0.7, size=(n_clutter, 1)) * np.ones((1, 3)))

    points = PointSet(np.concatenate(coords) if coords else np.zeros((0, 3)),
                      np.concatenate(colors) if colors else np.zeros((0, 3)))
    return SceneSample(points, boxes, scene_id or f"scene_{seed:05d}", seed)


# ============== AUGMENTATION ==============

def augment_scene(sample: SceneSample, rng: np.random.Generator, rotate: bool = True) -> SceneSample:
    """Random x-flip, small z-rotation, isotropic scaling and translation, applied jointly."""
    coords = sample.points.coords.copy()
    boxes = [(lb.box.center_array.copy(), lb.box.size_array.copy(), lb.box.yaw, lb.class_id)
             for lb in sample.gt_boxes]

    if rng.uniform() < 0.5:
        coords[:, 0] = -coords[:, 0]
        boxes = [(np.array([-c[0], c[1], c[2]]), s, -yaw, k) for c, s, yaw, k in boxes]
    if rotate:
        phi = rng.uniform(-math.radians(5.0), math.radians(5.0))
        cp, sp = math.cos(phi), math.sin(phi)
        rot = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
        coords = coords @ rot.T
        boxes = [(rot @ c, s, yaw + phi, k) for c, s, yaw, k in boxes]
    scale = rng.uniform(0.6, 1.4)
    shift = rng.uniform(-0.4, 0.4, size=3)
    coords = coords * scale + shift

    gt = [LabeledBox(RotatedBox3(tuple(c * scale + shift), tuple(s * scale), yaw), k)
          for c, s, yaw, k in boxes]
    return SceneSample(PointSet(coords, sample.points.colors), gt, sample.scene_id, sample.seed)


# ============== SCENE FILES ==============

def scene_to_file(sample: SceneSample) -> SceneFile:
    return SceneFile(
        points=sample.points.features().tolist(),
        boxes=boxes_to_records(sample.gt_boxes),
        seed=sample.seed,
        scene_id=sample.scene_id,
    )


def write_scene(path, sample: SceneSample):
    path = Path(path)
    payload = scene_to_file(sample).model_dump(by_alias=True)
    try:
        path.write_text(json.dumps(payload))
    except OSError as e:
        raise SceneFormatError(path, f"cannot write scene: {e}")


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item.get("loc", ())) or "<root>"
        parts.append(f"{loc}: {item.get('msg')}")
    return "; ".join(parts)


def read_scene(path) -> SceneSample:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise SceneFormatError(path, f"cannot read scene: {e}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneFormatError(path, f"line {e.lineno} column {e.colno}: {e.msg}")
    try:
        parsed = SceneFile.model_validate(data)
    except ValidationError as e:
        raise SceneFormatError(path, _describe(e))

    rows = np.asarray(parsed.points, dtype=np.float64).reshape(-1, 6)
    try:
        points = PointSet(rows[:, :3], rows[:, 3:])
        boxes = [
            LabeledBox(RotatedBox3(tuple(b.center), tuple(b.size), b.yaw), b.class_id)
            for b in parsed.boxes
        ]
    except GeometryError as e:
        raise SceneFormatError(path, str(e))
    return SceneSample(points, boxes, parsed.scene_id or path.stem, parsed.seed)


def scene_paths(directory) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise SceneFormatError(directory, "scene directory does not exist")
    return sorted(p for p in directory.glob("*.json") if p.name != "config.json")


def load_scenes(directory) -> List[SceneSample]:
    return [read_scene(p) for p in scene_paths(directory)]


def generate_scenes(config: GenConfig) -> List[SceneSample]:
    """Scene i is generated from seed config.seed + i."""
    scenes = []
    for i in range(config.scenes):
        seed = config.seed + i
        scenes.append(generate_scene(seed, config, f"scene_{seed:05d}"))
        logger.debug(f"generated scene {seed} with {len(scenes[-1].gt_boxes)} boxes")
    return scenes


def boxes_to_records(boxes: Sequence[LabeledBox]) -> List[BoxRecord]:
    return [BoxRecord(center=list(b.box.center), size=list(b.box.size), yaw=b.box.yaw, class_id=b.class_id)
            for b in boxes]
