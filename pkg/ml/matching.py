"""Hungarian assignment with the six-term cost, one-to-many target repetition, and the training loss."""
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from errors import MatchingError
from geometry import giou_rotated
from ml.detector import LayerPrediction, angle_target
from ml.tensor import (
    Tensor,
    add,
    aligned_giou,
    cross_entropy,
    focal_loss,
    gather,
    huber_loss,
    l1_loss,
    mul,
    sum_,
)
from models import LabeledBox
from schemas import LossWeightsConfig


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int]]
    n_predictions: int

    @property
    def matched(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def targets(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    @property
    def unmatched(self) -> List[int]:
        used = {p for p, _ in self.pairs}
        return [i for i in range(self.n_predictions) if i not in used]

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[p, g] for p, g in self.pairs))


def hungarian(cost) -> MatchResult:
    """Minimum-cost assignment of every column to a distinct row (P >= G)."""
    cost = np.asarray(getattr(cost, "data", cost), dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost matrix must be 2D, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_pred < n_gt:
        raise MatchingError(f"need at least as many predictions as targets, got {n_pred} < {n_gt}")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix has non-finite entries")
    if n_gt == 0:
        return MatchResult([], n_pred)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda pair: pair[1])
    return MatchResult(pairs, n_pred)


def match_targets(cost) -> MatchResult:
    """
    Like hungarian, but a scene with more targets than predictions is matched
    rectangularly: every prediction gets a target and the surplus targets stay unmatched.
    """
    cost = np.asarray(getattr(cost, "data", cost), dtype=np.float64)
    if cost.ndim == 2 and cost.shape[0] < cost.shape[1]:
        if not np.all(np.isfinite(cost)):
            raise MatchingError("cost matrix has non-finite entries")
        rows, cols = linear_sum_assignment(cost)
        pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda pair: pair[1])
        return MatchResult(pairs, cost.shape[0])
    return hungarian(cost)


def repeat_targets(gts: Sequence[LabeledBox], k: int) -> List[LabeledBox]:
    """Each target k times in a row; copy j of target i lands at index i * k + j."""
    if k < 1:
        raise MatchingError(f"repeat count must be >= 1, got {k}")
    return [g for g in gts for _ in range(k)]


# ============== COST ==============

def focal_class_cost(p: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Focal-style cost of calling the true class at probability p."""
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    positive = alpha * (1.0 - p) ** gamma * -np.log(p)
    negative = (1.0 - alpha) * p ** gamma * -np.log(1.0 - p)
    return positive - negative


def _huber(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _angle_targets(pred: LayerPrediction, gts: Sequence[LabeledBox]) -> Tuple[np.ndarray, np.ndarray]:
    """P x G angle bins and residuals of each target relative to each prediction's reference."""
    bins = pred.angle_logits.shape[1]
    n_pred, n_gt = len(pred), len(gts)
    bin_ids = np.zeros((n_pred, n_gt), dtype=np.int64)
    residuals = np.zeros((n_pred, n_gt))
    for i in range(n_pred):
        for j, gt in enumerate(gts):
            bin_ids[i, j], residuals[i, j] = angle_target(gt.box.yaw - pred.ref_yaws[i], bins)
    return bin_ids, residuals


def match_cost(pred: LayerPrediction, gts: Sequence[LabeledBox], w: LossWeightsConfig) -> np.ndarray:
    """P x G cost; the same six terms as the loss, evaluated on the exact rotated boxes."""
    n_pred, n_gt = len(pred), len(gts)
    cost = np.zeros((n_pred, n_gt))
    if n_gt == 0:
        return cost
    gt_centers = np.array([g.box.center_array for g in gts])
    gt_sizes = np.array([g.box.size_array for g in gts])
    gt_classes = np.array([g.class_id for g in gts], dtype=np.int64)

    if w.giou > 0:
        giou = np.array([[giou_rotated(p, g.box) for g in gts] for p in pred.boxes])
        cost -= w.giou * giou
    if w.center > 0:
        cost += w.center * np.abs(pred.center.data[:, None, :] - gt_centers[None]).sum(axis=2)
    if w.size > 0:
        target = np.log(gt_sizes[None] / pred.size_base[:, None, :])
        cost += w.size * np.abs(pred.log_ratio.data[:, None, :] - target).sum(axis=2)
    if w.focal > 0:
        probs = pred.class_probs()[:, gt_classes]
        cost += w.focal * focal_class_cost(probs, w.focal_alpha, w.focal_gamma)
    if w.angle_residual > 0 or w.angle_class > 0:
        bin_ids, residuals = _angle_targets(pred, gts)
        rows = np.arange(n_pred)[:, None]
        if w.angle_residual > 0:
            predicted = pred.angle_residual.data[rows, bin_ids]
            cost += w.angle_residual * _huber(predicted - residuals, w.huber_delta)
        if w.angle_class > 0:
            logp = _log_softmax(pred.angle_logits.data)
            cost += w.angle_class * -logp[rows, bin_ids]
    return cost


# ============== LOSS ==============

@dataclass
class LossBreakdown:
    total: float = 0.0
    terms: Dict[str, float] = field(default_factory=dict)
    matches: int = 0

    def add_term(self, name: str, value: float):
        self.terms[name] = self.terms.get(name, 0.0) + value


def _accumulate(loss, term):
    return term if loss is None else add(loss, term)


def layer_loss(pred: LayerPrediction, gts: Sequence[LabeledBox], match: MatchResult,
               w: LossWeightsConfig, n_classes: int, breakdown: LossBreakdown) -> Tensor:
    """Six-term loss of one stage, normalized by max(1, number of targets)."""
    norm = 1.0 / max(1, len(gts))
    idx_p, idx_g = match.matched, match.targets
    loss = None

    if len(idx_p):
        targets = [gts[g] for g in idx_g]
        gt_centers = np.array([t.box.center_array for t in targets])
        gt_sizes = np.array([t.box.size_array for t in targets])
        if w.giou > 0:
            giou = sum_(aligned_giou(gather(pred.center, idx_p), gather(pred.size, idx_p), gt_centers, gt_sizes))
            term = mul(giou, -w.giou * norm)
            breakdown.add_term("giou", term.item())
            loss = _accumulate(loss, term)
        if w.center > 0:
            term = mul(l1_loss(gather(pred.center, idx_p), gt_centers), w.center * norm)
            breakdown.add_term("center", term.item())
            loss = _accumulate(loss, term)
        if w.size > 0:
            target = np.log(gt_sizes / pred.size_base[idx_p])
            term = mul(l1_loss(gather(pred.log_ratio, idx_p), target), w.size * norm)
            breakdown.add_term("size", term.item())
            loss = _accumulate(loss, term)
        if w.angle_residual > 0 or w.angle_class > 0:
            bins = pred.angle_logits.shape[1]
            encoded = [angle_target(t.box.yaw - pred.ref_yaws[p], bins) for p, t in zip(idx_p, targets)]
            bin_ids = np.array([b for b, _ in encoded], dtype=np.int64)
            residuals = np.array([r for _, r in encoded])
            if w.angle_residual > 0:
                onehot = np.eye(bins)[bin_ids]
                picked = sum_(mul(gather(pred.angle_residual, idx_p), onehot), axis=1)
                term = mul(huber_loss(picked, residuals, w.huber_delta), w.angle_residual * norm)
                breakdown.add_term("angle_residual", term.item())
                loss = _accumulate(loss, term)
            if w.angle_class > 0:
                term = mul(cross_entropy(gather(pred.angle_logits, idx_p), bin_ids), w.angle_class * norm)
                breakdown.add_term("angle_class", term.item())
                loss = _accumulate(loss, term)

    if w.focal > 0:
        classes = np.full(len(pred), n_classes, dtype=np.int64)
        for p, g in zip(idx_p, idx_g):
            classes[p] = gts[g].class_id
        alpha_t = np.where(classes == n_classes, 1.0 - w.focal_alpha, w.focal_alpha)
        term = mul(focal_loss(pred.class_logits, classes, alpha_t, w.focal_gamma), w.focal * norm)
        breakdown.add_term("focal", term.item())
        loss = _accumulate(loss, term)

    return loss if loss is not None else Tensor(0.0)


def detection_loss(predictions: Sequence[LayerPrediction], gts: Sequence[LabeledBox],
                   w: LossWeightsConfig, n_classes: int, repeat: int = 1) -> Tuple[Tensor, LossBreakdown]:
    """Deep-supervised loss: match and score every supervised stage, then sum."""
    breakdown = LossBreakdown()
    total = None
    for pred in predictions:
        if not pred.supervised:
            continue
        k = repeat
        if gts and len(gts) * k > len(pred):
            k = max(1, len(pred) // len(gts))
        targets = repeat_targets(gts, k)
        match = match_targets(match_cost(pred, targets, w))
        breakdown.matches += len(match.pairs)
        total = _accumulate(total, layer_loss(pred, targets, match, w, n_classes, breakdown))
    if total is None:
        total = Tensor(0.0)
    breakdown.total = total.item()
    return total, breakdown
