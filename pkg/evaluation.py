"""
Detection evaluation: class-wise 3D NMS, AP at IoU thresholds, the attention-locality
metric, and per-vertex attention-map export.
"""
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError
from tqdm import tqdm

from errors import ConfigError, SceneFormatError
from geometry import contains_points, iou_rotated
from metrics import STAGE_LATENCY
from ml.detector import VertexDetector
from ml.matching import match_cost, match_targets
from ml.rpe import vertex_maps
from ml.tensor import no_grad, write_tensor
from models import Detection, DetectionSet, LabeledBox, RotatedBox3, SceneSample
from observability import get_logger, log_stage_event
from schemas import DetectionFile, DetectionRecord, LossWeightsConfig, MetricsReport, SceneDetections

logger = get_logger("evaluation")

AP_THRESHOLDS = (0.25, 0.5)


# ============== NMS ==============

def nms3d(dets: DetectionSet, iou_threshold: float) -> DetectionSet:
    """Greedy by descending score; drop boxes overlapping a kept box of the same class."""
    for d in dets.detections:
        if not np.isfinite(d.score):
            raise ConfigError(f"non-finite detection score in scene {dets.scene_id}")
    order = sorted(range(len(dets.detections)), key=lambda i: -dets.detections[i].score)
    kept: List[Detection] = []
    for i in order:
        cand = dets.detections[i]
        if all(k.class_id != cand.class_id or iou_rotated(k.box, cand.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return DetectionSet(dets.scene_id, kept)


# ============== AP ==============

def _pr_integral(is_tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0 or len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    precisions = tp / (np.arange(len(is_tp)) + 1)
    recalls = tp / n_gt
    precisions = np.concatenate([[0.0], precisions, [0.0]])
    recalls = np.concatenate([[0.0], recalls, [1.0]])
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    idx = np.where(recalls[:-1] != recalls[1:])[0] + 1
    return float(np.sum((recalls[idx] - recalls[idx - 1]) * precisions[idx]))


def average_precision(dets: Sequence[DetectionSet], gts: Dict[str, Sequence[LabeledBox]],
                      iou_threshold: float) -> Tuple[Dict[str, float], float]:
    """Per-class AP and mAP over the classes that have ground truth."""
    classes = sorted({g.class_id for boxes in gts.values() for g in boxes})
    per_class: Dict[str, float] = {}
    for c in classes:
        gt_by_scene = {sid: [g.box for g in boxes if g.class_id == c] for sid, boxes in gts.items()}
        n_gt = sum(len(v) for v in gt_by_scene.values())
        candidates = [
            (d.score, ds.scene_id, d.box)
            for ds in dets for d in ds.detections if d.class_id == c
        ]
        order = sorted(range(len(candidates)), key=lambda i: -candidates[i][0])
        used = {sid: np.zeros(len(v), dtype=bool) for sid, v in gt_by_scene.items()}
        is_tp = np.zeros(len(order))
        for rank, i in enumerate(order):
            _, sid, box = candidates[i]
            boxes = gt_by_scene.get(sid, [])
            best, best_iou = -1, -1.0
            for j, gt_box in enumerate(boxes):
                if used[sid][j]:
                    continue
                iou = iou_rotated(box, gt_box)
                if iou >= iou_threshold and iou > best_iou:
                    best, best_iou = j, iou
            if best >= 0:
                used[sid][best] = True
                is_tp[rank] = 1.0
        per_class[str(c)] = _pr_integral(is_tp, n_gt)
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean_ap


# ============== LOCALITY ==============

def locality_from_attention(weights: np.ndarray, coords: np.ndarray, query: int, box: RotatedBox3) -> float:
    """Head-averaged attention mass of one query on the points inside `box`."""
    row = weights[:, query, :].mean(axis=0)
    return float(np.clip(row[contains_points(box, coords)].sum(), 0.0, 1.0))


def attention_locality(model: VertexDetector, scene: SceneSample,
                       weights: Optional[LossWeightsConfig] = None) -> List[Optional[float]]:
    """Per decoder layer: mean locality over queries matched to ground truth, None if nothing matched."""
    weights = (weights or LossWeightsConfig()).for_yaw_mode(model.config.yaw_mode)
    with no_grad():
        result = model.forward(scene.points)
    out: List[Optional[float]] = []
    for layer, attn in enumerate(result.attention):
        pred = result.predictions[layer + 1]
        if not scene.gt_boxes:
            out.append(None)
            continue
        match = match_targets(match_cost(pred, scene.gt_boxes, weights))
        values = [
            locality_from_attention(attn, result.encoder.coords, p, scene.gt_boxes[g].box)
            for p, g in match.pairs
        ]
        out.append(float(np.mean(values)) if values else None)
    return out


def mean_locality(per_scene: Sequence[Sequence[Optional[float]]]) -> Dict[str, Optional[float]]:
    layers = max((len(s) for s in per_scene), default=0)
    summary: Dict[str, Optional[float]] = {}
    for layer in range(layers):
        values = [s[layer] for s in per_scene if layer < len(s) and s[layer] is not None]
        summary[f"layer_{layer}"] = float(np.mean(values)) if values else None
    return summary


# ============== ATTENTION EXPORT ==============

def _write_map(path: Path, coords: np.ndarray, values: np.ndarray):
    frame = pd.DataFrame({"x": coords[:, 0], "y": coords[:, 1], "z": coords[:, 2], "value": values})
    frame.to_csv(path, index=False, float_format="%.17g")


def export_attention(model: VertexDetector, scene: SceneSample, query: int, out_dir,
                     layer: int = -1) -> Dict[str, Path]:
    """
    Writes v{i}.csv (head-averaged bias of anchor i at every scene point), merged.csv
    (their sum) and attention.csv (the query's head-averaged attention row over the
    seeds), plus VDT1 dumps of the raw maps. Returns {name: path}.
    """
    if not model.layers:
        raise ConfigError("attention export needs at least one decoder layer")
    layer = layer if layer >= 0 else len(model.layers) + layer
    if not 0 <= layer < len(model.layers):
        raise ConfigError(f"layer {layer} out of range for {len(model.layers)} decoder layers")
    if not 0 <= query < model.config.queries:
        raise ConfigError(f"query index {query} out of range [0, {model.config.queries})")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with no_grad():
        result = model.forward(scene.points)
        box = result.predictions[layer].boxes[query]
        coords = scene.points.coords
        maps = vertex_maps(model.layers[layer].bias, box, coords)

    written: Dict[str, Path] = {}
    merged = np.zeros(len(coords))
    for name, values in maps.items():
        merged = merged + values
        written[name] = out_dir / f"{name}.csv"
        _write_map(written[name], coords, values)
    written["merged"] = out_dir / "merged.csv"
    _write_map(written["merged"], coords, merged)

    attn = result.attention[layer]
    written["attention"] = out_dir / "attention.csv"
    _write_map(written["attention"], result.encoder.coords, attn[:, query, :].mean(axis=0))

    written["attention_dump"] = out_dir / "attention.vdt"
    with open(written["attention_dump"], "wb") as fh:
        write_tensor(fh, attn[:, query, :])
    if maps:
        written["vertex_dump"] = out_dir / "vertex_maps.vdt"
        with open(written["vertex_dump"], "wb") as fh:
            write_tensor(fh, np.stack(list(maps.values())))
    logger.info(f"exported attention maps for query {query}, layer {layer} to {out_dir}")
    return written


# ============== DETECTION FILES ==============

def detections_to_file(sets: Sequence[DetectionSet]) -> DetectionFile:
    return DetectionFile(scenes=[
        SceneDetections(scene_id=ds.scene_id, boxes=[
            DetectionRecord(center=list(d.box.center), size=list(d.box.size), yaw=d.box.yaw,
                            class_id=d.class_id, score=d.score)
            for d in ds.detections
        ])
        for ds in sets
    ])


def write_detections(path, sets: Sequence[DetectionSet]):
    Path(path).write_text(json.dumps(detections_to_file(sets).model_dump(by_alias=True)))


def read_detections(path) -> List[DetectionSet]:
    path = Path(path)
    try:
        parsed = DetectionFile.model_validate(json.loads(path.read_text()))
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        raise SceneFormatError(path, f"bad detection file: {e}")
    return [
        DetectionSet(s.scene_id, [
            Detection(RotatedBox3(tuple(r.center), tuple(r.size), r.yaw), r.class_id, r.score)
            for r in s.boxes
        ])
        for s in parsed.scenes
    ]


# ============== DRIVER ==============

def run_detector(model: VertexDetector, scenes: Sequence[SceneSample], threads: int = 1,
                 nms_iou: Optional[float] = None) -> List[DetectionSet]:
    """Forward passes over scenes; parameters are read-only so scenes may run in parallel."""
    def _one(scene: SceneSample) -> DetectionSet:
        dets = model.predict(scene.points, scene.scene_id)
        return nms3d(dets, nms_iou) if nms_iou is not None else dets

    start = time.time()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(tqdm(pool.map(_one, scenes), total=len(scenes), desc="eval", leave=False))
    else:
        results = [_one(s) for s in tqdm(scenes, desc="eval", leave=False)]
    elapsed = time.time() - start
    STAGE_LATENCY.labels(stage="inference").observe(elapsed)
    log_stage_event("inference", "complete", elapsed * 1000.0, {"scenes": len(scenes), "threads": threads})
    return results


def evaluate_detections(dets: Sequence[DetectionSet], scenes: Sequence[SceneSample],
                        locality: Optional[Dict[str, Optional[float]]] = None) -> MetricsReport:
    gts = {s.scene_id: s.gt_boxes for s in scenes}
    ap25, map25 = average_precision(dets, gts, 0.25)
    ap50, map50 = average_precision(dets, gts, 0.5)
    return MetricsReport(n_scenes=len(scenes), ap25=ap25, ap50=ap50, map25=map25, map50=map50,
                         locality=locality or {})


def evaluate_model(model: VertexDetector, scenes: Sequence[SceneSample], threads: int = 1,
                   nms_iou: Optional[float] = 0.25) -> Tuple[MetricsReport, List[DetectionSet]]:
    dets = run_detector(model, scenes, threads, nms_iou)
    locality = mean_locality([attention_locality(model, s) for s in scenes])
    return evaluate_detections(dets, scenes, locality), dets
