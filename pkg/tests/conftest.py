import numpy as np
import pytest

from stopgame.game import GameModel, ObservationModel


def random_model(rng: np.random.Generator, n_servers: int = 1, n_obs: int = 3, discount: float = 0.9, **kw) -> GameModel:
    z = rng.dirichlet(np.ones(n_obs), size=n_servers + 1)
    return GameModel(n_servers, float(rng.uniform(0.05, 0.95)), discount, ObservationModel(z), **kw)


def random_belief(rng: np.random.Generator, n_states: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_states))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model():
    z = np.array([[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]])
    return GameModel(1, 0.4, 0.9, ObservationModel(z))
