import numpy as np
import pytest

from models.scene import SceneSpec
from models.tafe_config import TafeConfig
from tafe.synthdata import gen_dataset
from tafe.tensor import get_threads, set_threads


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """32x32, d=8, one stage: the smallest model that exercises every component."""
    return TafeConfig(
        d=8, stages=1, heads=2, classes=4, height=32, width=32,
        learning_rate=0.1, iterations=4, batch_size=2, seed=0, checkpoint_every=2
    ).validate()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_dataset")
    gen_dataset(4, 100, str(out), spec=SceneSpec(height=32, width=32))
    return out


@pytest.fixture
def restore_threads():
    before = get_threads()
    yield
    set_threads(before)
