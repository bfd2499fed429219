"""
Toy point-cloud detector: point encoder, FPS query initialization, the light-weight
initial-box FFN, and a pre-norm decoder stack whose cross-attention is modulated by the
vertex relative-position bias. Every stage emits box predictions (deep supervision).
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from errors import ShapeError
from ml.attention import MultiHeadAttention, cross_attention, self_attention
from ml.rpe import AttentionBias, RpeTable, default_table_extent
from ml.tensor import (
    ParameterStore,
    Tensor,
    add,
    clamp,
    exp,
    gather,
    layer_norm,
    linear,
    max_,
    mul,
    narrow,
    no_grad,
    relu,
)
from models import Detection, DetectionSet, PointSet, RotatedBox3, YawMode, normalize_yaw
from schemas import DetectorConfig

SIZE_LOG_CLAMP = 12.0


# ============== SAMPLING ==============

def farthest_point_sampling(coords: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Indices of m points picked greedily by distance to the picked set, from `start`."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if m > n:
        raise ShapeError(f"cannot sample {m} points from {n}")
    picked = np.empty(m, dtype=np.int64)
    if m == 0:
        return picked
    picked[0] = start
    dists = np.linalg.norm(coords - coords[start], axis=1)
    for i in range(1, m):
        idx = int(np.argmax(dists))
        picked[i] = idx
        dists = np.minimum(dists, np.linalg.norm(coords - coords[idx], axis=1))
    return picked


# ============== BOX PARAMETERIZATION ==============

def encode_size(size: np.ndarray, reference: np.ndarray) -> np.ndarray:
    return np.log(np.asarray(size, dtype=np.float64) / np.asarray(reference, dtype=np.float64))


def decode_size(log_ratio: np.ndarray, reference: np.ndarray) -> np.ndarray:
    return np.asarray(reference, dtype=np.float64) * np.exp(np.asarray(log_ratio, dtype=np.float64))


def bin_centers(bins: int) -> np.ndarray:
    return np.array([normalize_yaw(2.0 * math.pi * b / bins) for b in range(bins)])


def angle_target(delta: float, bins: int) -> Tuple[int, float]:
    """(bin, residual) encoding a yaw delta; bin 0 is centered on zero."""
    width = 2.0 * math.pi / bins
    delta = normalize_yaw(delta)
    b = int(round(delta / width)) % bins
    return b, normalize_yaw(delta - bin_centers(bins)[b])


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ============== DATA CARRIERS ==============

@dataclass
class EncoderOutput:
    features: Tensor  # N' x C
    coords: np.ndarray  # N' x 3
    centroid: np.ndarray
    extent: np.ndarray  # per-axis scene extent, size base when not object-normalized
    point_coords: np.ndarray  # N x 3 raw points


@dataclass
class QuerySet:
    content: Tensor  # K x C
    positions: np.ndarray  # K x 3
    boxes: List[RotatedBox3]
    seed_index: np.ndarray


@dataclass
class LayerPrediction:
    """One stage's outputs; tensors feed the loss, `boxes` are the decoded references."""
    center: Tensor  # K x 3
    log_ratio: Tensor  # K x 3, size target space
    size: Tensor  # K x 3
    angle_logits: Tensor  # K x B
    angle_residual: Tensor  # K x B
    class_logits: Tensor  # K x (n_classes + 1), last column is no-object
    boxes: List[RotatedBox3]
    size_base: np.ndarray  # K x 3
    ref_yaws: np.ndarray  # K
    supervised: bool = True

    def __len__(self) -> int:
        return len(self.boxes)

    def class_probs(self) -> np.ndarray:
        return _softmax(self.class_logits.data)

    def objectness(self) -> np.ndarray:
        return 1.0 - self.class_probs()[:, -1]


@dataclass
class ForwardResult:
    predictions: List[LayerPrediction]
    attention: List[np.ndarray] = field(default_factory=list)  # heads x K x N' per layer
    encoder: Optional[EncoderOutput] = None
    queries: Optional[QuerySet] = None


# ============== MODEL ==============

class _Mlp:
    def __init__(self, store: ParameterStore, prefix: str, d_in: int, d_hidden: int, d_out: int):
        self.w1, self.b1 = store.weight(f"{prefix}.w1", d_in, d_hidden), store.bias(f"{prefix}.b1", d_hidden)
        self.w2, self.b2 = store.weight(f"{prefix}.w2", d_hidden, d_out), store.bias(f"{prefix}.b2", d_out)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(relu(linear(x, self.w1, self.b1)), self.w2, self.b2)


class _LayerNorm:
    def __init__(self, store: ParameterStore, prefix: str, d: int):
        self.gamma = store.ones(f"{prefix}.gamma", d)
        self.beta = store.bias(f"{prefix}.beta", d)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


def _table_extent(config: DetectorConfig) -> float:
    if config.table_extent is not None:
        return config.table_extent
    return default_table_extent(config.nonlinear)


class DecoderLayer:

    def __init__(self, store: ParameterStore, index: int, config: DetectorConfig, head_dim: int):
        prefix = f"decoder.{index}"
        d = config.d_model
        self.index = index
        self.box_pe = _Mlp(store, f"{prefix}.box_pe", 6, d, d) if index > 0 else None
        self.norm_self = _LayerNorm(store, f"{prefix}.norm_self", d)
        self.self_attn = MultiHeadAttention(store, f"{prefix}.self_attn", d, config.heads)
        self.norm_cross = _LayerNorm(store, f"{prefix}.norm_cross", d)
        self.cross_attn = MultiHeadAttention(store, f"{prefix}.cross_attn", d, config.heads)
        self.norm_ffn = _LayerNorm(store, f"{prefix}.norm_ffn", d)
        self.ffn = _Mlp(store, f"{prefix}.ffn", d, config.ffn_hidden, d)
        self.norm_head = _LayerNorm(store, f"{prefix}.norm_head", d)
        self.head = _Mlp(store, f"{prefix}.head", d, config.ffn_hidden, head_dim)
        self.bias = AttentionBias(
            store, f"{prefix}.rpe", config.rpe_mode, config.heads, config.rpe_hidden,
            kind=config.nonlinear, vertex_count=config.vertex_count, frame=config.frame,
            table=RpeTable.cubic(config.table_res, _table_extent(config)), mask_neg=config.mask_neg,
        )


class VertexDetector:

    def __init__(self, config: DetectorConfig):
        self.config = config
        self.store = ParameterStore(np.random.default_rng(config.seed))
        d = config.d_model
        self.head_dim = 6 + 2 * config.angle_bins + config.n_classes + 1
        self.point_mlp = _Mlp(self.store, "encoder.point_mlp", 6, d, d)
        self.query_pos = _Mlp(self.store, "queries.pos_mlp", 3, d, d)
        self.init_head = _Mlp(self.store, "init_head", d, config.ffn_hidden, self.head_dim) \
            if config.initial_ffn else None
        self.layers = [DecoderLayer(self.store, i, config, self.head_dim) for i in range(config.layers)]

    def parameters(self):
        return list(self.store)

    # ---------- encoder ----------

    def encode_points(self, scene: PointSet) -> EncoderOutput:
        n = len(scene)
        if n < self.config.candidates:
            raise ShapeError(f"scene has {n} points, need at least {self.config.candidates}")
        feats = scene.features()
        centroid = scene.coords.mean(axis=0)
        extent = np.maximum(scene.coords.max(axis=0) - scene.coords.min(axis=0), 1e-3)
        centered = np.concatenate([scene.coords - centroid, feats[:, 3:]], axis=1)
        point_feats = self.point_mlp(Tensor(centered))

        n_seeds = min(self.config.seeds, n)
        seed_idx = farthest_point_sampling(scene.coords, n_seeds)
        seed_coords = scene.coords[seed_idx]
        k = min(self.config.knn, n)
        _, neighbours = cKDTree(scene.coords).query(seed_coords, k=k)
        neighbours = np.asarray(neighbours, dtype=np.int64).reshape(n_seeds, k)
        pooled = max_(gather(point_feats, neighbours), axis=1)
        return EncoderOutput(pooled, seed_coords, centroid, extent, scene.coords)

    # ---------- queries ----------

    def init_queries(self, enc: EncoderOutput, k: int) -> QuerySet:
        n_seeds = enc.coords.shape[0]
        if k > n_seeds:
            raise ShapeError(f"cannot pick {k} queries from {n_seeds} seeds")
        idx = farthest_point_sampling(enc.coords, k)
        positions = enc.coords[idx]
        content = add(gather(enc.features, idx), self.query_pos(Tensor(positions - enc.centroid)))
        boxes = [RotatedBox3(tuple(p), (1.0, 1.0, 1.0), 0.0) for p in positions]
        return QuerySet(content, positions, boxes, idx)

    # ---------- heads ----------

    def _decode(self, raw: Tensor, ref_centers: np.ndarray, ref_yaws: np.ndarray,
                size_base: np.ndarray) -> LayerPrediction:
        cfg = self.config
        bins = cfg.angle_bins
        d_center = narrow(raw, 0, 3)
        log_ratio = narrow(raw, 3, 6)
        angle_logits = narrow(raw, 6, 6 + bins)
        angle_residual = narrow(raw, 6 + bins, 6 + 2 * bins)
        class_logits = narrow(raw, 6 + 2 * bins, self.head_dim)
        center = add(d_center, Tensor(ref_centers))
        bounded = clamp(log_ratio, -SIZE_LOG_CLAMP, SIZE_LOG_CLAMP)
        size = mul(exp(bounded), Tensor(size_base))

        sizes = decode_size(bounded.data, size_base)
        if cfg.yaw_mode == YawMode.FREE:
            best = np.argmax(angle_logits.data, axis=1)
            rows = np.arange(len(best))
            yaws = ref_yaws + bin_centers(bins)[best] + angle_residual.data[rows, best]
        else:
            yaws = np.zeros(len(ref_centers))
        boxes = [
            RotatedBox3(tuple(c), tuple(s), float(y))
            for c, s, y in zip(center.data, sizes, yaws)
        ]
        return LayerPrediction(center, log_ratio, size, angle_logits, angle_residual, class_logits,
                               boxes, np.array(size_base, dtype=np.float64), np.asarray(ref_yaws, dtype=np.float64))

    def initial_boxes(self, enc: EncoderOutput, queries: QuerySet) -> Tuple[LayerPrediction, QuerySet]:
        """Initial proposals around the query positions, re-ranked by objectness, top-K kept."""
        k = self.config.queries
        count = len(queries.positions)
        ones = np.ones((count, 3))
        if self.init_head is None:
            raw = Tensor(np.zeros((count, self.head_dim)))
            pred = self._decode(raw, queries.positions, np.zeros(count), ones)
            pred.supervised = False
            return pred, QuerySet(queries.content, queries.positions, pred.boxes, queries.seed_index)

        raw = self.init_head(queries.content)
        pred = self._decode(raw, queries.positions, np.zeros(count), ones)
        order = np.argsort(-pred.objectness(), kind="stable")
        pred = _reorder(pred, order)
        keep = order[:k]
        kept = QuerySet(
            gather(queries.content, keep),
            queries.positions[keep],
            pred.boxes[:k],
            queries.seed_index[keep],
        )
        return pred, kept

    # ---------- decoder ----------

    def _box_features(self, boxes: Sequence[RotatedBox3], centroid: np.ndarray) -> np.ndarray:
        return np.array([
            np.concatenate([b.center_array - centroid, np.log(b.size_array)]) for b in boxes
        ])

    def decoder_layer(self, layer: DecoderLayer, queries: QuerySet,
                      enc: EncoderOutput) -> Tuple[LayerPrediction, QuerySet, np.ndarray]:
        x = queries.content
        if layer.box_pe is not None:
            x = add(x, layer.box_pe(Tensor(self._box_features(queries.boxes, enc.centroid))))
        x = add(x, self_attention(layer.self_attn, layer.norm_self(x)))
        bias = layer.bias(queries.boxes, enc.coords)
        attended, weights = cross_attention(layer.cross_attn, layer.norm_cross(x), enc.features,
                                            enc.features, bias)
        x = add(x, attended)
        x = add(x, layer.ffn(layer.norm_ffn(x)))
        raw = layer.head(layer.norm_head(x))

        ref_centers = np.array([b.center_array for b in queries.boxes])
        ref_yaws = np.array([b.yaw for b in queries.boxes])
        if self.config.object_normalized:
            size_base = np.array([b.size_array for b in queries.boxes])
        else:
            size_base = np.tile(enc.extent, (len(queries.boxes), 1))
        pred = self._decode(raw, ref_centers, ref_yaws, size_base)
        refined = QuerySet(x, pred.center.data.copy(), pred.boxes, queries.seed_index)
        return pred, refined, weights.data

    def forward(self, scene: PointSet) -> ForwardResult:
        enc = self.encode_points(scene)
        queries = self.init_queries(enc, self.config.candidates)
        initial, queries = self.initial_boxes(enc, queries)
        result = ForwardResult([initial], [], enc, queries)
        for layer in self.layers:
            pred, queries, weights = self.decoder_layer(layer, queries, enc)
            result.predictions.append(pred)
            result.attention.append(weights)
        return result

    # ---------- inference ----------

    def detections(self, pred: LayerPrediction, scene_id: str) -> DetectionSet:
        """One detection per query: the most probable object class and its probability."""
        probs = pred.class_probs()[:, :-1]
        classes = np.argmax(probs, axis=1)
        dets = [
            Detection(box, int(c), float(probs[i, c]))
            for i, (box, c) in enumerate(zip(pred.boxes, classes))
        ]
        return DetectionSet(scene_id, dets)

    def predict(self, scene: PointSet, scene_id: str) -> DetectionSet:
        with no_grad():
            result = self.forward(scene)
        return self.detections(result.predictions[-1], scene_id)


def _reorder(pred: LayerPrediction, order: np.ndarray) -> LayerPrediction:
    return LayerPrediction(
        gather(pred.center, order),
        gather(pred.log_ratio, order),
        gather(pred.size, order),
        gather(pred.angle_logits, order),
        gather(pred.angle_residual, order),
        gather(pred.class_logits, order),
        [pred.boxes[i] for i in order],
        pred.size_base[order],
        pred.ref_yaws[order],
        pred.supervised,
    )
