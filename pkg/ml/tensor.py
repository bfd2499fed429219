"""
Dense f64 tensors with tape-based reverse-mode differentiation.

The op set is closed: every differentiable operation the detector needs lives in this
module (structural ops, matmul, elementwise arithmetic, relu/exp, layer norm,
softmax with additive bias, gather, trilinear lookup, clamping, reductions, and the fused loss
ops). Anything else is a GraphError at the call site.

Each op computes its forward value with numpy and, when any input requires a gradient,
records a closure that maps the output gradient to input gradients. backward() replays
those closures in reverse topological order.
"""
from __future__ import annotations

import contextlib
import struct
import threading
from typing import BinaryIO, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, GraphError, NumericError, ShapeError

DUMP_MAGIC = b"VDT1"

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on this thread (evaluation, finite differences)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    def __repr__(self) -> str:
        return f"<Tensor shape={self.shape} op={self._op} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor that always requires a gradient."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"<Parameter {self.name} shape={self.shape}>"


class ParameterStore:
    """Ordered registry of named parameters; names are unique within a model."""

    def __init__(self, rng: Optional[np.random.Generator] = None):
        self._params: Dict[str, Parameter] = {}
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        param = Parameter(np.array(data, dtype=np.float64), name)
        self._params[name] = param
        return param

    def weight(self, name: str, d_in: int, d_out: int) -> Parameter:
        """Glorot-uniform matrix."""
        limit = np.sqrt(6.0 / (d_in + d_out))
        return self.add(name, self.rng.uniform(-limit, limit, size=(d_in, d_out)))

    def bias(self, name: str, d_out: int) -> Parameter:
        return self.add(name, np.zeros(d_out))

    def ones(self, name: str, d_out: int) -> Parameter:
        return self.add(name, np.ones(d_out))

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: Dict[str, np.ndarray]):
        for name, p in self._params.items():
            if name not in state:
                raise ConfigError(f"missing parameter in state: {name}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()


# ============== GRAPH PLUMBING ==============

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    requires = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Parameter]] = None) -> Dict[str, np.ndarray]:
    """
    Reverse-mode sweep from a scalar loss.

    Leaf tensors that require gradients get `.grad` (accumulated). If `params` is given,
    returns {name: grad} for each of them, with zeros for parameters the loss does not
    reach.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    if params is None:
        return {}
    return {
        p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for p in params
    }


# ============== STRUCTURAL OPS ==============

def detach(x: Tensor) -> Tensor:
    return x.detach()


def reshape(x: Tensor, shape: tuple) -> Tensor:
    original = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _backward, "concat")


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start, stop) along the last axis."""
    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _make(x.data[..., start:stop], (x,), _backward, "narrow")


def gather(x: Tensor, indices) -> Tensor:
    """Rows of x at `indices` (any integer array shape) along axis 0."""
    idx = np.asarray(indices, dtype=np.int64)

    def _backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.take(x.data, idx, axis=0), (x,), _backward, "gather")


# ============== ARITHMETIC ==============

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    a[..., m, k] @ b[..., k, n]. Leading batch dims must match exactly, or b may be a
    plain 2D matrix shared across the batch.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} and {b.shape}")

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), _backward, "matmul")


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x W + b over the last axis of x."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
    out = matmul(x, W) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), W), (W.shape[1],))
    return add(out, b) if b is not None else out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero where the input was clipped."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def pointwise(x: Tensor, fn: Callable[[np.ndarray], np.ndarray],
              dfn: Callable[[np.ndarray], np.ndarray], name: str) -> Tensor:
    """Elementwise map with a known derivative; used for the offset nonlinearities."""
    return _make(fn(x.data), (x,), lambda g: (g * dfn(x.data),), name)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std

    def _backward(g):
        lead = tuple(range(g.ndim - 1))
        d_gamma = (g * x_hat).sum(axis=lead)
        d_beta = g.sum(axis=lead)
        dx_hat = g * gamma.data
        dx = inv_std * (dx_hat - dx_hat.mean(axis=-1, keepdims=True)
                        - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True))
        return dx, d_gamma, d_beta

    return _make(x_hat * gamma.data + beta.data, (x, gamma, beta), _backward, "layer_norm")


def softmax_rows(logits: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Softmax over the last axis of logits + bias (bias broadcast onto logits)."""
    logits = _as_tensor(logits)
    z = logits.data
    if bias is not None:
        bias = _as_tensor(bias)
        try:
            z = z + bias.data
        except ValueError:
            raise ShapeError(f"softmax_rows: bias {bias.shape} does not broadcast onto {logits.shape}")
        if z.shape != logits.shape:
            raise ShapeError(f"softmax_rows: bias {bias.shape} would grow logits {logits.shape}")
    if np.isnan(z).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        gz = y * (g - (g * y).sum(axis=-1, keepdims=True))
        if bias is None:
            return (gz,)
        return gz, _unbroadcast(gz, bias.shape)

    parents = (logits,) if bias is None else (logits, bias)
    return _make(y, parents, _backward, "softmax")


# ============== REDUCTIONS ==============

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), _backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def max_(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def _backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, gk, axis=axis)
        return (gx,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), _backward, "max")


# ============== INTERPOLATION ==============

def trilinear(values: Tensor, coords: np.ndarray) -> Tensor:
    """
    Trilinear lookup in a node grid.

    values: Tensor[nx, ny, nz, C] of node outputs. coords: M x 3 in grid units
    (0 .. n-1 per axis, already clamped). Returns Tensor[M, C]. Differentiable
    w.r.t. values only; coords are constants.
    """
    if values.ndim != 4:
        raise ShapeError(f"trilinear: values must be 4D, got {values.shape}")
    coords = np.asarray(coords, dtype=np.float64)
    dims = np.array(values.shape[:3])
    if np.any(dims < 2):
        raise ShapeError(f"trilinear: grid needs >= 2 nodes per axis, got {values.shape[:3]}")
    base = np.clip(np.floor(coords).astype(np.int64), 0, dims - 2)
    frac = coords - base

    corners = []
    for bits in range(8):
        offset = np.array([(bits >> 2) & 1, (bits >> 1) & 1, bits & 1])
        idx = base + offset
        w = np.prod(np.where(offset == 1, frac, 1.0 - frac), axis=1)
        corners.append((idx, w))

    out = np.zeros((coords.shape[0], values.shape[3]))
    for idx, w in corners:
        out += w[:, None] * values.data[idx[:, 0], idx[:, 1], idx[:, 2]]

    def _backward(g):
        gv = np.zeros_like(values.data)
        for idx, w in corners:
            np.add.at(gv, (idx[:, 0], idx[:, 1], idx[:, 2]), w[:, None] * g)
        return (gv,)

    return _make(out, (values,), _backward, "trilinear")


# ============== FUSED LOSS OPS ==============

def l1_loss(pred: Tensor, target) -> Tensor:
    """sum |pred - target|"""
    diff = pred.data - np.asarray(target, dtype=np.float64)
    return _make(np.abs(diff).sum(), (pred,), lambda g: (g * np.sign(diff),), "l1_loss")


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """sum of 0.5 r^2 for |r| <= delta, delta (|r| - 0.5 delta) beyond."""
    r = pred.data - np.asarray(target, dtype=np.float64)
    a = np.abs(r)
    value = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta)).sum()
    return _make(value, (pred,), lambda g: (g * np.clip(r, -delta, delta),), "huber_loss")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """sum over rows of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = _log_softmax(logits.data)
    rows = np.arange(targets.shape[0])
    value = -logp[rows, targets].sum()

    def _backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (g * grad,)

    return _make(value, (logits,), _backward, "cross_entropy")


def focal_loss(logits: Tensor, targets, alpha_t, gamma: float) -> Tensor:
    """sum over rows of alpha_t (1 - p_t)^gamma (-log p_t), p = softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    alpha_t = np.asarray(alpha_t, dtype=np.float64)
    logp = _log_softmax(logits.data)
    p = np.exp(logp)
    rows = np.arange(targets.shape[0])
    logp_t = logp[rows, targets]
    p_t = p[rows, targets]
    one_minus = np.clip(1.0 - p_t, 0.0, None)
    value = (alpha_t * one_minus ** gamma * -logp_t).sum()

    def _backward(g):
        if gamma == 0.0:
            ramp = np.zeros_like(p_t)
        else:
            safe = np.where(one_minus > 0.0, one_minus, 1.0)
            ramp = np.where(one_minus > 0.0, gamma * safe ** (gamma - 1.0), 0.0)
        coef = alpha_t * (ramp * p_t * logp_t - one_minus ** gamma)
        onehot = np.zeros_like(p)
        onehot[rows, targets] = 1.0
        return (g * coef[:, None] * (onehot - p),)

    return _make(value, (logits,), _backward, "focal_loss")


def aligned_giou(center: Tensor, size: Tensor, gt_center, gt_size) -> Tensor:
    """
    Per-row GIoU of axis-aligned boxes (yaw ignored), differentiable w.r.t. the
    predicted center and size. Returns Tensor[M].
    """
    c, s = center.data, size.data
    gc = np.asarray(gt_center, dtype=np.float64)
    gs = np.asarray(gt_size, dtype=np.float64)
    lo_p, hi_p = c - 0.5 * s, c + 0.5 * s
    lo_g, hi_g = gc - 0.5 * gs, gc + 0.5 * gs
    inter_raw = np.minimum(hi_p, hi_g) - np.maximum(lo_p, lo_g)
    inter = np.maximum(inter_raw, 0.0)
    enc = np.maximum(hi_p, hi_g) - np.minimum(lo_p, lo_g)
    vol_i = inter.prod(axis=1)
    vol_p = s.prod(axis=1)
    union = vol_p + gs.prod(axis=1) - vol_i
    vol_e = enc.prod(axis=1)
    value = vol_i / union - (vol_e - union) / vol_e

    def _others(a):
        return np.stack([a[:, 1] * a[:, 2], a[:, 0] * a[:, 2], a[:, 0] * a[:, 1]], axis=1)

    def _backward(g):
        d_i = g * (1.0 / union + vol_i / union ** 2 - 1.0 / vol_e)
        d_vp = g * (-vol_i / union ** 2 + 1.0 / vol_e)
        d_e = g * (-union / vol_e ** 2)
        d_inter = d_i[:, None] * _others(inter)
        d_enc = d_e[:, None] * _others(enc)
        active = inter_raw > 0.0
        d_hi = d_inter * (active & (hi_p < hi_g)) + d_enc * (hi_p >= hi_g)
        d_lo = -d_inter * (active & (lo_p > lo_g)) - d_enc * (lo_p <= lo_g)
        d_center = d_hi + d_lo
        d_size = 0.5 * (d_hi - d_lo) + d_vp[:, None] * _others(s)
        return d_center, d_size

    return _make(value, (center, size), _backward, "aligned_giou")


# ============== VERIFICATION ==============

def finite_diff_errors(params: Sequence[Parameter], loss_fn: Callable[[], Tensor], step: float = 1e-5,
                       max_entries: Optional[int] = None,
                       rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """
    Per-parameter max of |analytic - numeric| / max(1, |numeric|) using central
    differences. `max_entries` samples that many coordinates per parameter.
    """
    params = list(params)
    for p in params:
        p.grad = None
    analytic = backward(loss_fn(), params)
    rng = rng if rng is not None else np.random.default_rng(0)

    errors: Dict[str, float] = {}
    for p in params:
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        grad_flat = analytic[p.name].reshape(-1)
        for i in entries:
            original = flat[i]
            with no_grad():
                flat[i] = original + step
                plus = loss_fn().item()
                flat[i] = original - step
                minus = loss_fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, abs(grad_flat[i] - numeric) / max(1.0, abs(numeric)))
        errors[p.name] = worst
    return errors


def finite_diff_check(params: Sequence[Parameter], loss_fn: Callable[[], Tensor], step: float = 1e-5,
                      max_entries: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    errors = finite_diff_errors(params, loss_fn, step, max_entries, rng)
    return max(errors.values(), default=0.0)


# ============== DUMP FORMAT ==============

def write_tensor(fh: BinaryIO, array: np.ndarray):
    """magic "VDT1", u32 rank, u32 dims[rank], f64 payload; all little-endian."""
    array = np.ascontiguousarray(array, dtype="<f8")
    fh.write(DUMP_MAGIC)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(array.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != DUMP_MAGIC:
        raise ShapeError(f"bad tensor record magic: {magic!r}")
    header = fh.read(4)
    if len(header) != 4:
        raise ShapeError("truncated tensor record header")
    (rank,) = struct.unpack("<I", header)
    dims_raw = fh.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise ShapeError("truncated tensor record dims")
    dims = struct.unpack(f"<{rank}I", dims_raw)
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ShapeError(f"truncated tensor payload: expected {8 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
