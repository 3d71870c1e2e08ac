import numpy as np
import pytest
import torch

from codmine.data import SyntheticSpec, generate_synthetic_benchmark
from codmine.model import DetectorConfig

torch.set_num_threads(1)


@pytest.fixture
def small_config():
    return DetectorConfig(num_classes=4, image_size=(32, 32), backbone_channels=(4, 8, 8),
                          neck_channels=8, head_depth=1, grid_stride=8)


@pytest.fixture(scope="session")
def tiny_tasks():
    spec = SyntheticSpec(class_groups=((0, 1), (2, 3)), background_styles=("plain", "plain"),
                         num_classes=4, image_size=(32, 32), train_per_task=16, val_per_task=2,
                         test_per_task=6, max_instances=3, min_size=6, max_size=12, seed=5)
    return generate_synthetic_benchmark(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
