"""
Shared fixtures: seeded generators, a narrow run configuration and a tiny
synthetic dataset that keeps training tests fast.
"""

from typing import Callable

import pytest
import torch

from app.core.config import load_run_config
from app.kernels.tensor import make_generator
from app.schemas.config import RunConfig
from app.services.dataset import SyntheticDataset, gen_synthetic

TINY_OVERRIDES = {
    "mode": "lffn+aqm",
    "backbone.stem_channels": 4,
    "backbone.stage_channels": [4, 4, 8, 8],
    "fusion.output_channels": 8,
    "fusion.p5_channels": 8,
    "fusion.topdown_channel_schedule": [6, 4, 2],
    "anchors.strides": [2, 4, 8, 16, 32],
    "anchors.base_sizes": [8, 16, 24, 32, 48],
    "dataset.num_train": 3,
    "dataset.num_test": 2,
    "training.iterations": 4,
    "training.checkpoint_every": 2,
    "training.smoothing_window": 2,
    "nms.pre_nms_top_k": 20,
    "nms.max_detections": 30,
}


@pytest.fixture
def generator() -> torch.Generator:
    return make_generator(0)


@pytest.fixture
def make_config() -> Callable[..., RunConfig]:
    """Build a narrow RunConfig; keyword arguments are dotted overrides (use __ for dots)."""

    def factory(**overrides) -> RunConfig:
        values = dict(TINY_OVERRIDES)
        values.update({key.replace("__", "."): value for key, value in overrides.items()})
        return load_run_config(None, None, values)

    return factory


@pytest.fixture
def tiny_config(make_config) -> RunConfig:
    return make_config()


@pytest.fixture
def tiny_dataset(tiny_config) -> SyntheticDataset:
    return gen_synthetic(tiny_config.dataset, tiny_config.seed, "train")
