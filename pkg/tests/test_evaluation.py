import numpy as np
import pandas as pd
import pytest

from errors import ConfigError, SceneFormatError
from evaluation import (
    average_precision,
    evaluate_detections,
    evaluate_model,
    export_attention,
    locality_from_attention,
    mean_locality,
    nms3d,
    read_detections,
    run_detector,
    write_detections,
)
from ml.detector import VertexDetector
from ml.tensor import read_tensor
from models import Detection, DetectionSet, LabeledBox, RotatedBox3
from synthdata import generate_scenes


def _box(x, size=1.0):
    return RotatedBox3((x, 0.0, 0.0), (size, size, size), 0.0)


def _det(x, score, class_id=0):
    return Detection(_box(x), class_id, score)


# ============== NMS ==============

class TestNms:

    def test_identical_boxes(self):
        kept = nms3d(DetectionSet("s", [_det(0.0, 0.8), _det(0.0, 0.9)]), 0.5)
        assert [d.score for d in kept.detections] == [0.9]

    def test_disjoint_all_kept(self):
        kept = nms3d(DetectionSet("s", [_det(0.0, 0.9), _det(5.0, 0.8), _det(10.0, 0.7)]), 0.5)
        assert len(kept) == 3

    def test_chain(self):
        # A overlaps B, B overlaps C, A and C disjoint
        dets = DetectionSet("s", [_det(0.0, 0.9), _det(0.6, 0.8), _det(1.2, 0.7)])
        kept = nms3d(dets, 0.1)
        assert [d.score for d in kept.detections] == [0.9, 0.7]

    def test_classwise(self):
        kept = nms3d(DetectionSet("s", [_det(0.0, 0.9, 0), _det(0.0, 0.8, 1)]), 0.5)
        assert len(kept) == 2

    def test_non_finite_score(self):
        with pytest.raises(ConfigError):
            nms3d(DetectionSet("s", [_det(0.0, float("nan"))]), 0.5)


# ============== AP ==============

class TestAveragePrecision:

    def test_single_perfect(self):
        gts = {"s": [LabeledBox(_box(0.0), 0)]}
        per_class, mean_ap = average_precision([DetectionSet("s", [_det(0.0, 0.5)])], gts, 0.5)
        assert per_class == {"0": 1.0} and mean_ap == 1.0

    def test_no_detections(self):
        gts = {"s": [LabeledBox(_box(0.0), 0)]}
        _, mean_ap = average_precision([DetectionSet("s", [])], gts, 0.25)
        assert mean_ap == 0.0

    def test_hand_computed_curve(self):
        gts = {"s": [LabeledBox(_box(0.0), 0), LabeledBox(_box(5.0), 0)]}
        dets = [DetectionSet("s", [_det(0.0, 0.9), _det(20.0, 0.8), _det(5.0, 0.7)])]
        # P/R: (1, .5), (.5, .5), (2/3, 1) -> 0.5 * 1 + 0.5 * 2/3
        _, mean_ap = average_precision(dets, gts, 0.5)
        assert mean_ap == pytest.approx(0.5 + 0.5 * 2.0 / 3.0)

    def test_monotone_score_transform(self):
        gts = {"s": [LabeledBox(_box(0.0), 0), LabeledBox(_box(5.0), 0)]}
        raw = [(0.0, 0.9), (20.0, 0.8), (5.0, 0.7)]
        a = [DetectionSet("s", [_det(x, s) for x, s in raw])]
        b = [DetectionSet("s", [_det(x, s ** 3 - 2.0) for x, s in raw])]
        assert average_precision(a, gts, 0.5) == average_precision(b, gts, 0.5)

    def test_duplicate_detection_is_false_positive(self):
        gts = {"s": [LabeledBox(_box(0.0), 0)]}
        dets = [DetectionSet("s", [_det(0.0, 0.9), _det(0.0, 0.8)])]
        _, mean_ap = average_precision(dets, gts, 0.5)
        assert mean_ap == 1.0
        dets = [DetectionSet("s", [_det(0.0, 0.7), _det(20.0, 0.8)])]
        _, mean_ap = average_precision(dets, gts, 0.5)
        assert mean_ap == pytest.approx(0.5)

    def test_class_without_gt_excluded(self):
        gts = {"s": [LabeledBox(_box(0.0), 0)]}
        per_class, mean_ap = average_precision([DetectionSet("s", [_det(0.0, 0.9), _det(9.0, 0.9, 3)])], gts, 0.5)
        assert list(per_class) == ["0"] and mean_ap == 1.0

    def test_threshold_matters(self):
        gts = {"s": [LabeledBox(_box(0.0), 0)]}
        dets = [DetectionSet("s", [_det(0.4, 0.9)])]  # IoU 0.6 / 1.4
        assert average_precision(dets, gts, 0.25)[1] == 1.0
        assert average_precision(dets, gts, 0.5)[1] == 0.0


# ============== LOCALITY ==============

def test_locality_from_attention():
    coords = np.array([[0.0, 0.0, 0.0], [0.2, 0.0, 0.0], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0]])
    weights = np.array([[[0.4, 0.4, 0.1, 0.1]], [[0.2, 0.2, 0.3, 0.3]]])
    assert locality_from_attention(weights, coords, 0, _box(0.0)) == pytest.approx(0.6)


def test_mean_locality_skips_missing():
    summary = mean_locality([[0.2, None], [0.4, 0.5]])
    assert summary["layer_0"] == pytest.approx(0.3)
    assert summary["layer_1"] == pytest.approx(0.5)
    assert mean_locality([[None]]) == {"layer_0": None}


# ============== MODEL DRIVERS ==============

@pytest.fixture
def model(tiny_config):
    return VertexDetector(tiny_config)


def test_evaluate_model_report(model, small_scene):
    report, dets = evaluate_model(model, [small_scene])
    assert report.n_scenes == 1
    assert 0.0 <= report.map25 <= 1.0 and 0.0 <= report.map50 <= 1.0
    assert set(report.locality) == {"layer_0"}
    value = report.locality["layer_0"]
    assert value is None or 0.0 <= value <= 1.0
    assert len(dets) == 1


def test_threads_do_not_change_detections(model, small_gen_config):
    scenes = generate_scenes(small_gen_config)
    serial = run_detector(model, scenes, threads=1)
    parallel = run_detector(model, scenes, threads=2)
    assert [d.detections for d in serial] == [d.detections for d in parallel]


def test_detection_file_roundtrip(tmp_path, model, small_scene):
    dets = run_detector(model, [small_scene], nms_iou=0.25)
    path = tmp_path / "dets.json"
    write_detections(path, dets)
    loaded = read_detections(path)
    assert loaded[0].scene_id == small_scene.scene_id
    assert [d.class_id for d in loaded[0].detections] == [d.class_id for d in dets[0].detections]
    report = evaluate_detections(loaded, [small_scene])
    assert report.map25 == evaluate_detections(dets, [small_scene]).map25


def test_bad_detection_file(tmp_path):
    path = tmp_path / "dets.json"
    path.write_text("{not json")
    with pytest.raises(SceneFormatError):
        read_detections(path)


# ============== EXPORT ==============

class TestExportAttention:

    def test_files_and_merged_sum(self, tmp_path, model, small_scene):
        written = export_attention(model, small_scene, 0, tmp_path)
        maps = [pd.read_csv(written[f"v{i}"]) for i in range(8)]
        merged = pd.read_csv(written["merged"])
        n = len(small_scene.points)
        assert all(len(m) == n for m in maps) and len(merged) == n
        total = np.sum([m["value"].to_numpy() for m in maps], axis=0)
        np.testing.assert_allclose(merged["value"].to_numpy(), total, atol=1e-12)
        row = pd.read_csv(written["attention"])
        assert row["value"].sum() == pytest.approx(1.0)
        with open(written["vertex_dump"], "rb") as fh:
            assert read_tensor(fh).shape == (8, n)

    def test_zero_mlps_export_zeros(self, tmp_path, model, small_scene):
        for p in model.parameters():
            if ".rpe." in p.name:
                p.data[...] = 0.0
        written = export_attention(model, small_scene, 1, tmp_path)
        assert np.all(pd.read_csv(written["merged"])["value"].to_numpy() == 0.0)

    @pytest.mark.parametrize("query,layer", [(99, -1), (0, 5)])
    def test_bad_indices(self, tmp_path, model, small_scene, query, layer):
        with pytest.raises(ConfigError):
            export_attention(model, small_scene, query, tmp_path, layer=layer)
