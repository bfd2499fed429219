import itertools
import math

import numpy as np
import pytest

from errors import MatchingError
from ml.detector import LayerPrediction, VertexDetector
from ml.matching import (
    detection_loss,
    focal_class_cost,
    hungarian,
    match_cost,
    match_targets,
    repeat_targets,
)
from ml.tensor import Parameter, Tensor, backward, exp, finite_diff_check, mul
from models import LabeledBox, RotatedBox3, YawMode
from schemas import LossWeightsConfig


def _prediction(centers, sizes, n_classes=2, bins=4, class_logits=None, params=False):
    centers = np.asarray(centers, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    n = len(centers)
    make = (lambda data, name: Parameter(data, name)) if params else (lambda data, name: Tensor(data))
    center = make(centers, "center")
    log_ratio = make(np.zeros((n, 3)), "log_ratio")
    size = mul(exp(log_ratio), Tensor(sizes))
    logits = class_logits if class_logits is not None else np.zeros((n, n_classes + 1))
    boxes = [RotatedBox3(tuple(c), tuple(s)) for c, s in zip(centers, sizes)]
    return LayerPrediction(center, log_ratio, size, make(np.zeros((n, bins)), "angle_logits"),
                           make(np.zeros((n, bins)), "angle_residual"), make(np.asarray(logits, float), "class_logits"),
                           boxes, sizes.copy(), np.zeros(n))


# ============== ASSIGNMENT ==============

class TestHungarian:

    def test_known_assignment(self):
        match = hungarian(np.array([[1.0, 2.0], [2.0, 4.0]]))
        assert match.pairs == [(1, 0), (0, 1)]
        assert match.total_cost(np.array([[1.0, 2.0], [2.0, 4.0]])) == 4.0

    def test_rectangular(self):
        cost = np.array([[5.0], [1.0], [3.0]])
        match = hungarian(cost)
        assert match.pairs == [(1, 0)]
        assert match.unmatched == [0, 2]

    def test_empty_targets(self):
        match = hungarian(np.zeros((3, 0)))
        assert match.pairs == []
        assert match.unmatched == [0, 1, 2]

    def test_more_targets_than_predictions(self):
        with pytest.raises(MatchingError):
            hungarian(np.zeros((1, 2)))

    def test_match_targets_leaves_surplus_targets(self):
        match = match_targets(np.array([[3.0, 1.0]]))
        assert match.pairs == [(0, 1)]
        assert match.unmatched == []

    def test_match_targets_square_is_hungarian(self):
        cost = np.array([[1.0, 2.0], [2.0, 4.0]])
        assert match_targets(cost).pairs == hungarian(cost).pairs

    def test_match_targets_non_finite(self):
        with pytest.raises(MatchingError):
            match_targets(np.array([[np.inf, 1.0, 0.0]]))

    def test_non_finite(self):
        with pytest.raises(MatchingError):
            hungarian(np.array([[np.nan, 1.0], [0.0, 1.0]]))

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 6))
            cost = rng.uniform(-1, 1, size=(n, n))
            best = min(sum(cost[r, c] for c, r in enumerate(rows))
                       for rows in itertools.permutations(range(n)))
            assert hungarian(cost).total_cost(cost) == pytest.approx(best, abs=1e-9)


def test_repeat_targets_layout():
    gts = [LabeledBox(RotatedBox3((i, 0, 0), (1, 1, 1)), i) for i in range(2)]
    repeated = repeat_targets(gts, 3)
    assert [g.class_id for g in repeated] == [0, 0, 0, 1, 1, 1]
    with pytest.raises(MatchingError):
        repeat_targets(gts, 0)


# ============== COST ==============

def test_focal_class_cost_rewards_confidence():
    costs = focal_class_cost(np.array([0.1, 0.5, 0.9]), 0.25, 2.0)
    assert costs[0] > costs[1] > costs[2]


def test_match_cost_prefers_overlap():
    pred = _prediction([[0, 0, 0], [5, 5, 0]], [[1, 1, 1], [1, 1, 1]])
    gts = [LabeledBox(RotatedBox3((5.1, 5, 0), (1, 1, 1)), 0)]
    cost = match_cost(pred, gts, LossWeightsConfig())
    assert cost.shape == (2, 1)
    assert cost[1, 0] < cost[0, 0]
    assert hungarian(cost).pairs == [(1, 0)]


def test_match_cost_rotated_identical_box():
    pred = _prediction([[0.3, -0.2, 0.5]], [[2.0, 1.0, 1.0]])
    pred.boxes = [RotatedBox3((0.3, -0.2, 0.5), (2.0, 1.0, 1.0), 0.6)]
    gts = [LabeledBox(RotatedBox3((0.3, -0.2, 0.5), (2.0, 1.0, 1.0), 0.6), 0)]
    weights = LossWeightsConfig(giou=1.0, center=0.0, size=0.0, focal=0.0, angle_residual=0.0, angle_class=0.0)
    assert match_cost(pred, gts, weights)[0, 0] == pytest.approx(-1.0, abs=1e-9)


def test_match_cost_empty():
    pred = _prediction([[0, 0, 0]], [[1, 1, 1]])
    assert match_cost(pred, [], LossWeightsConfig()).shape == (1, 0)


# ============== LOSS ==============

class TestDetectionLoss:

    def test_no_targets_is_focal_only(self):
        pred = _prediction([[0, 0, 0], [1, 1, 1]], [[1, 1, 1]] * 2)
        loss, breakdown = detection_loss([pred], [], LossWeightsConfig(), n_classes=2)
        assert set(breakdown.terms) == {"focal"}
        # uniform logits over 3 classes, all rows no-object with alpha_t = 0.75
        p = 1.0 / 3.0
        expected = 2 * 0.75 * (1 - p) ** 2 * math.log(3.0)
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_perfect_prediction_terms(self):
        logits = np.array([[0.0, 20.0, -20.0]])
        pred = _prediction([[0.5, 0.5, 0.5]], [[1, 1, 1]], class_logits=logits)
        gts = [LabeledBox(RotatedBox3((0.5, 0.5, 0.5), (1, 1, 1)), 1)]
        weights = LossWeightsConfig().for_yaw_mode(YawMode.ZERO)
        _, breakdown = detection_loss([pred], gts, weights, n_classes=2)
        assert breakdown.terms["giou"] == pytest.approx(-2.0)
        assert breakdown.terms["center"] == 0.0
        assert breakdown.terms["size"] == 0.0
        assert breakdown.terms["focal"] < 1e-6
        assert "angle_residual" not in breakdown.terms

    def test_unsupervised_stage_skipped(self):
        pred = _prediction([[0, 0, 0]], [[1, 1, 1]])
        pred.supervised = False
        loss, breakdown = detection_loss([pred], [], LossWeightsConfig(), n_classes=2)
        assert loss.item() == 0.0 and breakdown.matches == 0

    def test_repeat_reduced_when_too_few_predictions(self):
        pred = _prediction([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[1, 1, 1]] * 3)
        gts = [LabeledBox(RotatedBox3((0, 0, 0), (1, 1, 1)), 0)]
        _, breakdown = detection_loss([pred], gts, LossWeightsConfig(), n_classes=2, repeat=5)
        assert breakdown.matches == 3

    def test_more_targets_than_predictions(self):
        pred = _prediction([[0, 0, 0], [2, 0, 0]], [[1, 1, 1]] * 2)
        gts = [LabeledBox(RotatedBox3((x, 0, 0), (1, 1, 1)), 0) for x in (0.0, 2.0, 4.0)]
        loss, breakdown = detection_loss([pred], gts, LossWeightsConfig(), n_classes=2)
        assert breakdown.matches == 2
        assert np.isfinite(loss.item())

    def test_sums_over_stages(self):
        pred = _prediction([[0, 0, 0], [1, 1, 1]], [[1, 1, 1]] * 2)
        single, _ = detection_loss([pred], [], LossWeightsConfig(), n_classes=2)
        double, _ = detection_loss([pred, pred], [], LossWeightsConfig(), n_classes=2)
        assert double.item() == pytest.approx(2 * single.item())

    def test_gradient_matches_finite_differences(self, rng):
        pred = _prediction(rng.uniform(-0.5, 0.5, size=(3, 3)), rng.uniform(0.6, 1.4, size=(3, 3)),
                           class_logits=rng.normal(size=(3, 3)), params=True)
        gts = [LabeledBox(RotatedBox3((0.1, 0.0, 0.1), (1.0, 0.8, 0.9), 0.2), 0)]
        weights = LossWeightsConfig()
        params = [pred.center, pred.log_ratio, pred.angle_logits, pred.angle_residual, pred.class_logits]

        def loss():
            fresh = LayerPrediction(pred.center, pred.log_ratio,
                                    mul(exp(pred.log_ratio), Tensor(pred.size_base)),
                                    pred.angle_logits, pred.angle_residual, pred.class_logits,
                                    pred.boxes, pred.size_base, pred.ref_yaws)
            value, _ = detection_loss([fresh], gts, weights, n_classes=2)
            return value

        assert finite_diff_check(params, loss) < 1e-5

    def test_model_loss_backpropagates(self, tiny_config, random_points, one_gt):
        model = VertexDetector(tiny_config)
        result = model.forward(random_points)
        loss, breakdown = detection_loss(result.predictions, one_gt, LossWeightsConfig(), tiny_config.n_classes)
        grads = backward(loss, model.parameters())
        assert np.isfinite(loss.item())
        assert breakdown.matches == tiny_config.layers + 1
        assert any(np.any(g != 0.0) for name, g in grads.items() if ".rpe." in name)
