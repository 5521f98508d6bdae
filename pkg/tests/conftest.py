import numpy as np
import pytest

from coda_lab.config import TrainConfig
from coda_lab.synthdata import generate, tail5


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_split():
    """
    Ten 16×16 tail5 images: 2 evaluation, 2 labeled, 6 unlabeled.
    """
    return generate(tail5(height=16, width=16, labeled_fraction=0.25, seed=3), n_images=10)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(
        labeled_batch=64,
        unlabeled_batch=64,
        max_iterations=6,
        eval_every=3,
        hidden=8,
    )
