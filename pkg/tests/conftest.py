import numpy as np
import pytest

from adaptlab import data_gen, model
from adaptlab.numerics import make_rng


@pytest.fixture(scope="session")
def gen():
    return data_gen.build_generators(data_gen.DominoConfig(seed=0, rho=1.0))


@pytest.fixture(scope="session")
def pretrained(gen):
    return model.pretrain(gen, model.PretrainConfig(seed=0))


@pytest.fixture(scope="session")
def small_train(gen):
    return data_gen.sample(gen, 1000, make_rng(0, "tests", "train"), rho=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
