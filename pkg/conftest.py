"""Shared pytest fixtures: seeded generators, tiny configs and datasets."""

import numpy as np
import pytest

from forward_model import LINE, POINT
from phantoms import PhantomSpec, generate_dataset
from pipeline import TrainConfig

TINY = (2, 2, 2, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(**overrides) -> TrainConfig:
    values = dict(
        mode=POINT, accel=4.0, steps=2, epochs=1, batch_size=2, seed=0, extent=16,
        recon_widths=TINY, policy_widths=TINY, line_hidden=8, pretrain_epochs=1,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def point_config():
    return tiny_config()


@pytest.fixture
def line_config():
    return tiny_config(mode=LINE, accel=2.0)


@pytest.fixture(scope="session")
def tiny_dataset():
    # 8 train, 1 val, 1 test
    return generate_dataset(PhantomSpec(extent=16, seed=0), count=10, split_seed=0)


@pytest.fixture
def phantom_batch(tiny_dataset):
    return tiny_dataset.images[:2].astype(np.float64)
