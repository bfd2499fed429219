"""
Oracle and property suites behind `main.py check`. Each suite returns a SuiteResult with
the measured maxima; a suite passes only if every measurement is within its bound.
"""
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from config import MC_SAMPLES
from geometry import (
    batch_offsets,
    contains_points,
    giou_rotated,
    iou_rotated,
    monte_carlo_overlap,
    random_box,
    rotate_scene,
    rotation_z,
)
from metrics import CHECK_FAILURES, STAGE_LATENCY
from ml.detector import VertexDetector
from ml.matching import detection_loss, hungarian
from ml.rpe import RpeTable, VertexMlp, inverse_nonlinear, nonlinear_array, rpe_exact, rpe_table
from ml.tensor import ParameterStore, finite_diff_errors, no_grad
from models import LabeledBox, NonlinearKind, PointSet, RotatedBox3, RpeMode, YawMode
from observability import get_logger, log_stage_event
from schemas import DetectorConfig, LossWeightsConfig

logger = get_logger("checks")

SUITES = ("geometry", "rpe", "grad", "matching")


@dataclass
class SuiteResult:
    suite: str
    passed: bool = True
    measurements: Dict[str, float] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)

    def expect(self, name: str, value: float, bound: float, below: bool = True):
        """Record a measurement; below=True means value must be < bound."""
        self.measurements[name] = float(value)
        ok = value < bound if below else value >= bound
        if not ok:
            self.passed = False
            self.failures.append(f"{name}={value:.3e} (bound {bound:.1e})")

    def to_dict(self) -> dict:
        return {"passed": self.passed, "measurements": self.measurements, "failures": self.failures}


# ============== GEOMETRY ==============

def geometry_suite(seed: int = 0, pairs: int = 200, samples: int = MC_SAMPLES) -> SuiteResult:
    rng = np.random.default_rng(seed)
    result = SuiteResult("geometry")

    giou_err = iou_err = 0.0
    symmetry = invariance = ordering = 0.0
    for _ in range(pairs):
        a = random_box(rng, spread=0.5)
        b = random_box(rng, spread=0.5)
        mc_iou, mc_giou = monte_carlo_overlap(a, b, samples, rng)
        giou_err = max(giou_err, abs(giou_rotated(a, b) - mc_giou))
        iou_err = max(iou_err, abs(iou_rotated(a, b) - mc_iou))
        symmetry = max(symmetry, abs(iou_rotated(a, b) - iou_rotated(b, a)))
        ordering = max(ordering, giou_rotated(a, b) - iou_rotated(a, b))
        phi = rng.uniform(-math.pi, math.pi)
        _, (ra, rb) = rotate_scene(np.zeros((0, 3)), [a, b], phi, rng.uniform(-3, 3, size=3))
        invariance = max(invariance, abs(iou_rotated(ra, rb) - iou_rotated(a, b)))
    result.expect("giou_mc_max_abs_err", giou_err, 0.01)
    result.expect("iou_mc_max_abs_err", iou_err, 0.01)
    result.expect("iou_symmetry_max_abs_diff", symmetry, 1e-15)
    result.expect("iou_rigid_invariance_max_abs_diff", invariance, 1e-9)
    result.expect("giou_minus_iou_max", ordering, 1e-12)

    cube = RotatedBox3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
    turned = RotatedBox3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), math.pi / 4)
    result.expect("iou_45deg_abs_err", abs(iou_rotated(cube, turned) - 1.0 / math.sqrt(2.0)), 0.002)
    mc_iou, _ = monte_carlo_overlap(cube, turned, samples, rng)
    result.expect("iou_45deg_mc_abs_err", abs(mc_iou - 1.0 / math.sqrt(2.0)), 0.002)

    box = RotatedBox3((0.2, -0.1, 0.3), (1.0, 1.0, 1.0), math.radians(30.0))
    pts = rng.uniform(-1.0, 1.5, size=(100_000, 3))
    local = (pts - box.center_array) @ rotation_z(box.yaw)
    oracle = np.all(np.abs(local) <= 0.5, axis=1)
    result.expect("contains_disagreements", int(np.count_nonzero(oracle != contains_points(box, pts))), 1)
    return result


# ============== RPE ==============

def _random_mlp(seed: int, anchors: int = 8, heads: int = 4, hidden: int = 32) -> VertexMlp:
    return VertexMlp(ParameterStore(np.random.default_rng(seed)), "check", anchors, hidden, heads)


def rpe_suite(seed: int = 0, offsets_count: int = 10_000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    result = SuiteResult("rpe")
    kind = NonlinearKind.SIGNED_LOG
    mlp = _random_mlp(seed)

    odd = 0.0
    x = rng.uniform(-20.0, 20.0, size=1000)
    for k in NonlinearKind:
        odd = max(odd, float(np.max(np.abs(nonlinear_array(k, -x) + nonlinear_array(k, x)))))
    result.expect("odd_symmetry_max_abs", odd, 1e-15)

    with no_grad():
        # offsets whose F-image sits exactly on table nodes
        table = RpeTable.cubic(10)
        nodes = table.node_coords().reshape(-1, 3)
        picks = nodes[rng.choice(len(nodes), size=200, replace=False)]
        on_nodes = np.repeat(inverse_nonlinear(kind, picks)[:, None, :], 8, axis=1)
        node_err = np.max(np.abs(rpe_table(on_nodes, table, mlp, kind).data - rpe_exact(on_nodes, mlp, kind).data))
        result.expect("table_node_max_abs_err", node_err, 1e-12)

        f_space = rng.uniform(-table.extent, table.extent, size=(offsets_count, 8, 3))
        offsets = inverse_nonlinear(kind, f_space)
        exact = rpe_exact(offsets, mlp, kind).data
        previous = math.inf
        monotone = 1.0
        for res in (5, 10, 25, 50):
            err = float(np.max(np.abs(rpe_table(offsets, RpeTable.cubic(res), mlp, kind).data - exact)))
            result.measurements[f"table_res{res}_max_abs_err"] = err
            if err > previous:
                monotone = 0.0
            previous = err
        result.expect("table_error_non_increasing", monotone, 1.0, below=False)

        box = RotatedBox3((0.5, -0.3, 0.4), (1.2, 0.8, 0.9), 0.7)
        pts = rng.uniform(-3.0, 3.0, size=(64, 3))
        base = rpe_exact(batch_offsets(pts, [box]), mlp, kind).data
        worst = 0.0
        for _ in range(50):
            coords, moved = rotate_scene(pts, [box], rng.uniform(-math.pi, math.pi))
            rotated = rpe_exact(batch_offsets(coords, moved), mlp, kind).data
            worst = max(worst, float(np.max(np.abs(rotated - base))))
        result.expect("canonical_invariance_max_abs", worst, 1e-9)

        zero = _random_mlp(seed + 1)
        for p in zero.parameters():
            p.data[...] = 0.0
        result.expect("zero_mlp_max_abs_bias", float(np.max(np.abs(rpe_exact(offsets[:100], zero, kind).data))), 1e-300)
    return result


# ============== GRADIENTS ==============

def grad_check_setup(seed: int = 0):
    """A 1-layer, 4-query, 64-point decoder with exact vertex bias and one labeled box."""
    config = DetectorConfig(
        d_model=16, heads=2, queries=4, layers=1, seeds=16, knn=4, ffn_hidden=16, rpe_hidden=8,
        n_classes=2, angle_bins=4, rpe_mode=RpeMode.EXACT, yaw_mode=YawMode.FREE,
        initial_ffn=False, seed=seed,
    )
    model = VertexDetector(config)
    rng = np.random.default_rng(seed)
    points = PointSet(rng.uniform(-1.0, 1.0, size=(64, 3)), rng.uniform(0.0, 1.0, size=(64, 3)))
    gts = [LabeledBox(RotatedBox3((0.1, 0.2, 0.0), (0.8, 0.6, 0.5), 0.3), 1)]
    weights = LossWeightsConfig()

    def loss_fn():
        result = model.forward(points)
        loss, _ = detection_loss(result.predictions, gts, weights, config.n_classes)
        return loss

    return model, loss_fn


def grad_suite(seed: int = 0, max_entries: int = 8) -> SuiteResult:
    result = SuiteResult("grad")
    model, loss_fn = grad_check_setup(seed)
    errors = finite_diff_errors(model.parameters(), loss_fn, step=1e-5, max_entries=max_entries,
                                rng=np.random.default_rng(seed))
    worst_name = max(errors, key=errors.get)
    logger.info(f"worst finite-difference error on {worst_name}: {errors[worst_name]:.3e}")
    result.expect("finite_diff_max_rel_err", errors[worst_name], 1e-4)
    rpe_params = [n for n in errors if ".rpe." in n]
    result.measurements["vertex_mlp_parameters_checked"] = float(len(rpe_params))
    return result


# ============== MATCHING ==============

def brute_force_assignment(cost: np.ndarray) -> float:
    n_pred, n_gt = cost.shape
    best = math.inf
    for rows in itertools.permutations(range(n_pred), n_gt):
        best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    return best


def matching_suite(seed: int = 0, trials: int = 1000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    result = SuiteResult("matching")
    agree = 0
    for _ in range(trials):
        n = int(rng.integers(1, 8))
        cost = rng.uniform(-1.0, 1.0, size=(n, n))
        if abs(hungarian(cost).total_cost(cost) - brute_force_assignment(cost)) <= 1e-9:
            agree += 1
    result.measurements["oracle_agreements"] = float(agree)
    result.measurements["trials"] = float(trials)
    if agree != trials:
        result.passed = False
        result.failures.append(f"hungarian disagreed with brute force in {trials - agree} of {trials} trials")
    return result


SUITE_FUNCS: Dict[str, Callable[[], SuiteResult]] = {
    "geometry": geometry_suite,
    "rpe": rpe_suite,
    "grad": grad_suite,
    "matching": matching_suite,
}


def run_suites(name: str) -> List[SuiteResult]:
    names = SUITES if name == "all" else (name,)
    results = []
    for suite in names:
        start = time.time()
        res = SUITE_FUNCS[suite]()
        elapsed = time.time() - start
        STAGE_LATENCY.labels(stage=f"check_{suite}").observe(elapsed)
        log_stage_event(f"check_{suite}", "passed" if res.passed else "failed", elapsed * 1000.0,
                        res.failures or None)
        if not res.passed:
            CHECK_FAILURES.labels(suite=suite).inc()
        results.append(res)
    return results
