"""
Vertex relative-position bias for cross-attention.

For a query box and a key point the bias is the sum over the box anchors (vertices, or
the center) of MLP_i(F(offset_i)), one MLP per anchor, one output per head. The exact
path evaluates the MLPs at every offset; the table path evaluates them once on a uniform
grid in F-space and interpolates. The box mask is the non-learned baseline.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, ShapeError
from geometry import VERTEX_SUBSETS, batch_offsets, contains_points
from ml.tensor import (
    ParameterStore,
    Tensor,
    add,
    linear,
    pointwise,
    relu,
    reshape,
    transpose,
    trilinear,
)
from models import CoordinateFrame, NonlinearKind, RotatedBox3, RpeMode

# ============== NONLINEAR TRANSFORMS ==============

_NONLINEAR = {
    NonlinearKind.IDENTITY: (
        lambda x: x.copy(),
        lambda x: np.ones_like(x),
        lambda y: y.copy(),
    ),
    NonlinearKind.SOFT_SIGN: (
        lambda x: x / (1.0 + np.abs(x)),
        lambda x: 1.0 / (1.0 + np.abs(x)) ** 2,
        lambda y: y / (1.0 - np.abs(y)),
    ),
    NonlinearKind.TANH: (
        np.tanh,
        lambda x: 1.0 - np.tanh(x) ** 2,
        np.arctanh,
    ),
    NonlinearKind.INV_SQRT: (
        lambda x: x / np.sqrt(1.0 + x * x),
        lambda x: (1.0 + x * x) ** -1.5,
        lambda y: y / np.sqrt(1.0 - y * y),
    ),
    NonlinearKind.SIGNED_LOG: (
        lambda x: np.sign(x) * np.log1p(np.abs(x)),
        lambda x: 1.0 / (1.0 + np.abs(x)),
        lambda y: np.sign(y) * np.expm1(np.abs(y)),
    ),
}


def nonlinear_array(kind: NonlinearKind, x: np.ndarray) -> np.ndarray:
    return _NONLINEAR[NonlinearKind(kind)][0](np.asarray(x, dtype=np.float64))


TABLE_SPAN = 10.0  # metres of offset the default table reaches on each side


def default_table_extent(kind: NonlinearKind) -> float:
    """F(TABLE_SPAN): the F-space half range the table needs to cover offsets up to 10 m."""
    return float(nonlinear_array(kind, TABLE_SPAN))


def inverse_nonlinear(kind: NonlinearKind, y: np.ndarray) -> np.ndarray:
    """F^-1, used to place offsets exactly on table nodes."""
    return _NONLINEAR[NonlinearKind(kind)][2](np.asarray(y, dtype=np.float64))


def apply_nonlinear(kind: NonlinearKind, x) -> Tensor:
    fn, dfn, _ = _NONLINEAR[NonlinearKind(kind)]
    x = x if isinstance(x, Tensor) else Tensor(x)
    return pointwise(x, fn, dfn, f"nonlinear_{NonlinearKind(kind).value}")


# ============== VERTEX MLPS ==============

class VertexMlp:
    """One 3 -> d_hidden -> heads MLP per anchor, ReLU in between."""

    def __init__(self, store: ParameterStore, prefix: str, anchors: int, d_hidden: int, heads: int):
        self.anchors = anchors
        self.heads = heads
        self.layers: List[Tuple] = []
        for i in range(anchors):
            name = f"{prefix}.v{i}"
            self.layers.append((
                store.weight(f"{name}.w1", 3, d_hidden),
                store.bias(f"{name}.b1", d_hidden),
                store.weight(f"{name}.w2", d_hidden, heads),
                store.bias(f"{name}.b2", heads),
            ))

    def parameters(self):
        return [p for layer in self.layers for p in layer]

    def __call__(self, i: int, x: Tensor) -> Tensor:
        w1, b1, w2, b2 = self.layers[i]
        return linear(relu(linear(x, w1, b1)), w2, b2)


# ============== TABLE ==============

@dataclass(frozen=True)
class RpeTable:
    """Uniform node grid over [-extent, extent]^3 in F-space."""
    resolution: Tuple[int, int, int] = (10, 10, 10)
    extent: float = float(np.log(11.0))

    def __post_init__(self):
        if not self.extent > 0:
            raise ConfigError(f"table extent must be positive, got {self.extent}")
        if any(n < 2 for n in self.resolution):
            raise ConfigError(f"table resolution needs >= 2 nodes per axis, got {self.resolution}")

    @classmethod
    def cubic(cls, n: int, extent: float = float(np.log(11.0))) -> "RpeTable":
        return cls((n, n, n), extent)

    def node_coords(self) -> np.ndarray:
        """nx x ny x nz x 3 node positions in F-space."""
        axes = [np.linspace(-self.extent, self.extent, n) for n in self.resolution]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_grid(self, f_values: np.ndarray) -> np.ndarray:
        """Clamp F-space points to the table and convert to grid units."""
        clamped = np.clip(f_values, -self.extent, self.extent)
        scale = (np.asarray(self.resolution) - 1) / (2.0 * self.extent)
        return (clamped + self.extent) * scale


# ============== BIAS PATHS ==============

def _as_batch(offsets: np.ndarray) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.ndim == 3:
        offsets = offsets[None]
    if offsets.ndim != 4 or offsets.shape[-1] != 3:
        raise ShapeError(f"offsets must be [K x] N x V x 3, got {offsets.shape}")
    return offsets


def _check_anchors(offsets: np.ndarray, mlp: VertexMlp):
    if offsets.shape[2] != mlp.anchors:
        raise ShapeError(f"offsets carry {offsets.shape[2]} anchors, MLP set expects {mlp.anchors}")


def _to_head_major(flat: Tensor, k: int, n: int, heads: int) -> Tensor:
    return transpose(reshape(flat, (k, n, heads)), (2, 0, 1))


def rpe_exact_terms(offsets: np.ndarray, mlp: VertexMlp, kind: NonlinearKind) -> List[Tensor]:
    """Per-anchor bias terms, each heads x K x N."""
    offsets = _as_batch(offsets)
    _check_anchors(offsets, mlp)
    k, n, v, _ = offsets.shape
    f = nonlinear_array(kind, offsets)
    terms = []
    for i in range(v):
        rows = Tensor(f[:, :, i, :].reshape(k * n, 3))
        terms.append(_to_head_major(mlp(i, rows), k, n, mlp.heads))
    return terms


def rpe_exact(offsets: np.ndarray, mlp: VertexMlp, kind: NonlinearKind) -> Tensor:
    """heads x K x N bias, sum over anchors of MLP_i(F(offset_i))."""
    terms = rpe_exact_terms(offsets, mlp, kind)
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def table_node_values(table: RpeTable, mlp: VertexMlp, i: int) -> Tensor:
    nodes = table.node_coords()
    flat = mlp(i, Tensor(nodes.reshape(-1, 3)))
    return reshape(flat, (*table.resolution, mlp.heads))


def rpe_table_terms(offsets: np.ndarray, table: RpeTable, mlp: VertexMlp,
                    kind: NonlinearKind) -> List[Tensor]:
    offsets = _as_batch(offsets)
    _check_anchors(offsets, mlp)
    k, n, v, _ = offsets.shape
    grid = table.to_grid(nonlinear_array(kind, offsets))
    terms = []
    for i in range(v):
        values = table_node_values(table, mlp, i)
        flat = trilinear(values, grid[:, :, i, :].reshape(k * n, 3))
        terms.append(_to_head_major(flat, k, n, mlp.heads))
    return terms


def rpe_table(offsets: np.ndarray, table: RpeTable, mlp: VertexMlp, kind: NonlinearKind) -> Tensor:
    """Table-interpolated bias; differentiable through the node values only."""
    terms = rpe_table_terms(offsets, table, mlp, kind)
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def box_mask_array(boxes: Sequence[RotatedBox3], points, neg: float) -> np.ndarray:
    coords = np.asarray(getattr(points, "coords", points), dtype=np.float64).reshape(-1, 3)
    mask = np.zeros((len(boxes), coords.shape[0]))
    for k, box in enumerate(boxes):
        mask[k, ~contains_points(box, coords)] = neg
    return mask


def box_mask_bias(boxes: Sequence[RotatedBox3], points, neg: float) -> Tensor:
    """K x N constant bias: 0 inside the box, neg outside."""
    return Tensor(box_mask_array(boxes, points, neg))


# ============== PER-LAYER BIAS ==============

class AttentionBias:
    """Builds the cross-attention bias of one decoder layer for the configured mode."""

    def __init__(self, store: ParameterStore, prefix: str, mode: RpeMode, heads: int, d_hidden: int,
                 kind: NonlinearKind = NonlinearKind.SIGNED_LOG, vertex_count: int = 8,
                 frame: CoordinateFrame = CoordinateFrame.CANONICAL,
                 table: Optional[RpeTable] = None, mask_neg: float = -1e4):
        if vertex_count not in VERTEX_SUBSETS:
            raise ConfigError(f"unsupported vertex count {vertex_count}")
        self.mode = RpeMode(mode)
        self.kind = NonlinearKind(kind)
        self.vertex_count = vertex_count
        self.frame = CoordinateFrame(frame)
        self.table = table if table is not None else RpeTable()
        self.mask_neg = mask_neg
        self.mlp: Optional[VertexMlp] = None
        if self.mode.uses_vertex_mlps:
            self.mlp = VertexMlp(store, prefix, vertex_count, d_hidden, heads)

    def offsets(self, boxes: Sequence[RotatedBox3], coords: np.ndarray) -> np.ndarray:
        return batch_offsets(coords, boxes, self.vertex_count, self.frame)

    def terms(self, boxes: Sequence[RotatedBox3], coords: np.ndarray) -> List[Tensor]:
        """Per-anchor learned terms (empty when the mode has no MLPs)."""
        if self.mlp is None:
            return []
        offsets = self.offsets(boxes, coords)
        if self.mode.uses_table:
            return rpe_table_terms(offsets, self.table, self.mlp, self.kind)
        return rpe_exact_terms(offsets, self.mlp, self.kind)

    def __call__(self, boxes: Sequence[RotatedBox3], coords: np.ndarray) -> Optional[Tensor]:
        """heads x K x N (or 1 x K x N for the mask alone), None for mode none."""
        bias = None
        for term in self.terms(boxes, coords):
            bias = term if bias is None else add(bias, term)
        if self.mode.uses_mask:
            mask = Tensor(box_mask_array(boxes, coords, self.mask_neg)[None])
            bias = mask if bias is None else add(bias, mask)
        return bias


def vertex_maps(bias: AttentionBias, box: RotatedBox3, coords: np.ndarray) -> Dict[str, np.ndarray]:
    """Head-averaged per-anchor bias at every point for one box: {"v0": N, ...}."""
    return {f"v{i}": t.data.mean(axis=0)[0] for i, t in enumerate(bias.terms([box], coords))}
