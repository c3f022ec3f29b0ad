import numpy as np
import pytest

from retouchlab.config import RunConfig
from retouchlab.data import generate, split


@pytest.fixture(scope="session")
def tiny_config():
    return RunConfig(
        dataset_root="unused", checkpoint="unused", seed=11, image_size=32,
        stage1_iters=40, stage2_iters=15, stage3_iters=15, decay_every=30,
        batch=4, count=16, train_fraction=0.75,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    samples = generate(tiny_config.gen_config())
    return split(samples, tiny_config.train_fraction, tiny_config.seed)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
