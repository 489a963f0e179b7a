"""Shared fixtures: one small trained baseline reused by statistical tests."""

import pytest
import torch

from dafr2.datasets import synth_shapes
from dafr2.nn import ArchConfig
from dafr2.trainer import ScheduleSpec, TrainConfig, train_baseline

torch.set_num_threads(2)

SMALL_ARCH = ArchConfig(stem_channels=8, block_channels=(8, 16, 32, 64), embedding_dim=64)


@pytest.fixture(scope="session")
def small_trained_baseline():
    """Baseline classifier trained once per session on synthetic shapes."""
    train = synth_shapes(2000, seed=200)
    cfg = TrainConfig(
        epochs=6, batch_size=128, seed=5, arch=SMALL_ARCH, schedule=ScheduleSpec(t_max=6)
    )
    bundle, _ = train_baseline(train, cfg)
    return bundle, train
