import numpy as np
import pytest

from models import LabeledBox, PointSet, RotatedBox3, RpeMode
from schemas import DetectorConfig, GenConfig
from synthdata import generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def unit_cube():
    return RotatedBox3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)


@pytest.fixture
def tiny_config():
    """Small enough for finite differences and fast forward passes."""
    return DetectorConfig(
        d_model=16, heads=2, queries=4, layers=1, seeds=16, knn=4, ffn_hidden=16,
        rpe_hidden=8, n_classes=2, angle_bins=4, rpe_mode=RpeMode.EXACT, seed=3,
    )


@pytest.fixture
def random_points(rng):
    return PointSet(rng.uniform(-1.0, 1.0, size=(64, 3)), rng.uniform(0.0, 1.0, size=(64, 3)))


@pytest.fixture
def one_gt():
    return [LabeledBox(RotatedBox3((0.1, 0.2, 0.0), (0.8, 0.6, 0.5), 0.0), 1)]


@pytest.fixture
def small_gen_config():
    return GenConfig(scenes=2, points=256, boxes_min=2, boxes_max=3, n_classes=2)


@pytest.fixture
def small_scene(small_gen_config):
    return generate_scene(7, small_gen_config)
