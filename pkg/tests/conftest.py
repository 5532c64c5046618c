import numpy as np
import pytest

from backdoor_lab.data import synth_split
from backdoor_lab.nn import cnn, fcn
from backdoor_lab.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def small_data():
    return synth_split(train_per_class=80, test_per_class=30, seed=0)


@pytest.fixture(scope="session")
def small_fcn(small_data):
    train_ds, _ = small_data
    model, _ = train(fcn(seed=0), train_ds, TrainConfig(epochs=8, learning_rate=0.05, seed=0))
    return model


@pytest.fixture(scope="session")
def random_cnn():
    """Untrained desk-scale CNN: the surgery's exactness claims hold for any weights."""
    return cnn(seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cnn(small_data):
    train_ds, _ = small_data
    model, _ = train(cnn(seed=0), train_ds, TrainConfig(epochs=2, learning_rate=0.02, seed=0))
    return model
