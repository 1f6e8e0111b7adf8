import numpy as np
import pytest

from src.config import ControllerConfig, PlantConfig, TaskConfig, TrainConfig
from src.models.trajectory import Trajectory
from src.utils.policy import ActorCritic
from src.utils.transfer_evaluator import DeploymentSetup


@pytest.fixture
def plant():
    return PlantConfig()


@pytest.fixture
def task():
    return TaskConfig()


@pytest.fixture
def small_policy():
    return ActorCritic(hidden_sizes=(8, 8), seed=123)


@pytest.fixture
def small_train_config():
    return TrainConfig(iterations=2, episodes_per_iteration=4, horizon=10, epochs_per_iteration=2,
                       minibatch_size=16, hidden_sizes=[8, 8], eval_episodes=0)


@pytest.fixture
def short_setup():
    return DeploymentSetup(PlantConfig(), TaskConfig(), ControllerConfig(), horizon=20, deterministic=True)


def make_trajectory(costs, theta=None, theta_ref=None, p_x=0.0):
    """
    コスト列 (長さ T+1) から最小限の軌道を作る。theta を与えると内側状態付き
    """
    costs = np.asarray(costs, dtype=np.int64)
    T = costs.size - 1
    outer = np.zeros((T + 1, 4))
    outer[:, 0] = p_x
    actions = np.zeros((T, 2))
    if theta_ref is not None:
        actions[:, 1] = theta_ref
    inner = None
    if theta is not None:
        inner = np.zeros((T + 1, 2))
        inner[:, 0] = theta
    return Trajectory(outer=outer, actions=actions, rewards=np.zeros(T + 1), costs=costs, inner=inner)
