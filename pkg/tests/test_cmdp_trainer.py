import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from src.config import TrainConfig
from src.models.errors import HorizonMismatchError
from src.models.states import OuterState
from src.utils.cmdp_trainer import (DualState, collect_rollouts, compute_gae, clipped_surrogate, dual_update,
                                    episode_cost, episode_discounted_cost, penalized_reward, ppo_loss,
                                    ppo_update, reward, train)
from src.utils.policy import encode_checkpoint
from tests.conftest import make_trajectory


def test_reward_at_goal():
    assert reward(OuterState(p_x=9.0, p_z=9.0)) == pytest.approx(10.0)


def test_reward_far_from_goal():
    assert reward(OuterState()) == pytest.approx(-1.62)


def test_reward_bonus_radius_is_strict():
    assert reward(OuterState(p_x=0.1), goal=(0.0, 0.0)) == pytest.approx(-0.0001)


def test_penalized_reward():
    assert penalized_reward(1.0, 1, 2.0) == -1.0
    assert penalized_reward(1.0, 0, 2.0) == 1.0


def test_dual_update():
    cfg = TrainConfig()
    assert dual_update(DualState(1.0), 0.05, cfg).lam == pytest.approx(1.0005)
    assert dual_update(DualState(0.0), 0.0, cfg).lam == 0.0


def test_dual_state_rejects_negative():
    with pytest.raises(ValueError):
        DualState(-0.1)


@given(lam=st.floats(min_value=0.0, max_value=100.0), cost=st.floats(min_value=0.0, max_value=1.0))
def test_dual_stays_nonnegative(lam, cost):
    assert dual_update(DualState(lam), cost, TrainConfig()).lam >= 0.0


def test_discounted_cost_all_unsafe():
    traj = make_trajectory([1, 1, 1, 1])
    assert episode_discounted_cost(traj, 1.0, 3) == pytest.approx(1.0)
    assert episode_cost(traj) == 4


def test_discounted_cost_horizon_mismatch():
    with pytest.raises(HorizonMismatchError):
        episode_discounted_cost(make_trajectory([0, 0, 1]), 0.99, 5)


@given(costs=st.lists(st.integers(min_value=0, max_value=1), min_size=2, max_size=40),
       gamma=st.floats(min_value=0.5, max_value=1.0))
def test_discounted_cost_is_normalized(costs, gamma):
    traj = make_trajectory(costs)
    assert 0.0 <= episode_discounted_cost(traj, gamma, traj.horizon) <= 1.0


def test_gae_single_step():
    adv = compute_gae(np.array([[1.0]]), np.array([[0.5, 2.0]]), gamma=0.9, gae_lambda=0.95)
    assert adv[0, 0] == pytest.approx(2.3)


def test_gae_monte_carlo_limit():
    rewards = np.array([[1.0, 2.0, 3.0]])
    values = np.array([[0.5, 0.1, -0.2, 4.0]])
    adv = compute_gae(rewards, values, gamma=1.0, gae_lambda=1.0)
    expected = [1 + 2 + 3 + 4 - 0.5, 2 + 3 + 4 - 0.1, 3 + 4 + 0.2]
    np.testing.assert_allclose(adv[0], expected)


def test_gae_one_step_limit():
    rewards = np.array([[1.0, 2.0]])
    values = np.array([[0.5, 0.1, -0.2]])
    adv = compute_gae(rewards, values, gamma=0.9, gae_lambda=0.0)
    np.testing.assert_allclose(adv[0], [1 + 0.9 * 0.1 - 0.5, 2 + 0.9 * -0.2 - 0.1])


def _batch_tensors(policy, n=32, seed=0):
    rng = np.random.default_rng(seed)
    obs = torch.as_tensor(rng.uniform([1, -1, 1, -1], [8, 1, 9, 1], size=(n, 4)))
    raw = torch.as_tensor(rng.normal(size=(n, 2)) * 0.3)
    advantages = torch.as_tensor(rng.normal(size=n))
    returns = torch.as_tensor(rng.normal(size=n))
    with torch.no_grad():
        old = policy.log_prob(obs, raw)
    return obs, raw, old, advantages, returns


def test_gradients_match_finite_differences(small_policy):
    cfg = TrainConfig()
    obs, raw, old, advantages, returns = _batch_tensors(small_policy)
    params = list(small_policy.parameters())
    loss, _ = ppo_loss(small_policy, obs, raw, old, advantages, returns, cfg)
    grads = torch.autograd.grad(loss, params)

    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(10):
        k = int(rng.integers(len(params)))
        index = tuple(int(rng.integers(n)) for n in params[k].shape)
        with torch.no_grad():
            original = params[k][index].item()
            params[k][index] = original + h
            plus, _ = ppo_loss(small_policy, obs, raw, old, advantages, returns, cfg)
            params[k][index] = original - h
            minus, _ = ppo_loss(small_policy, obs, raw, old, advantages, returns, cfg)
            params[k][index] = original
        numeric = (plus.item() - minus.item()) / (2 * h)
        np.testing.assert_allclose(numeric, grads[k][index].item(), rtol=1e-5, atol=1e-8)


def test_clipped_region_has_no_policy_gradient(small_policy):
    obs, raw, old, _, _ = _batch_tensors(small_policy)
    advantages = torch.ones(obs.shape[0], dtype=torch.float64)
    # ratio = e > 1 + clip_range
    surrogate = clipped_surrogate(small_policy, obs, raw, old - 1.0, advantages, clip_range=0.05)
    surrogate.backward()
    assert surrogate.item() == pytest.approx(1.05)
    for p in small_policy.actor.parameters():
        assert torch.count_nonzero(p.grad) == 0
    assert torch.count_nonzero(small_policy.log_std.grad) == 0


def test_zero_advantage_leaves_actor_unchanged(small_policy, plant, task):
    cfg = TrainConfig(horizon=5, episodes_per_iteration=3, epochs_per_iteration=2, minibatch_size=4,
                      value_coef=0.0)
    batch = collect_rollouts(small_policy, plant, task, cfg, 1.0, np.random.default_rng(0))
    batch.advantages = np.zeros_like(batch.advantages)
    before = [p.detach().clone() for p in small_policy.actor.parameters()] + [small_policy.log_std.detach().clone()]
    optimizer = torch.optim.Adam(small_policy.parameters(), lr=1e-3)
    ppo_update(small_policy, optimizer, batch, cfg, np.random.default_rng(1))
    after = list(small_policy.actor.parameters()) + [small_policy.log_std]
    for b, a in zip(before, after):
        assert torch.equal(b, a.detach())


def test_rollout_shapes_and_penalty(small_policy, plant, task):
    cfg = TrainConfig(horizon=6, episodes_per_iteration=3)
    batch = collect_rollouts(small_policy, plant, task, cfg, 2.0, np.random.default_rng(0))
    assert batch.obs.shape == (18, 4)
    assert len(batch.trajectories) == 3
    for i, traj in enumerate(batch.trajectories):
        assert traj.horizon == 6
        assert not traj.has_inner
        expected = traj.rewards[1:] - 2.0 * traj.costs[1:]
        np.testing.assert_allclose(batch.rewards[i * 6:(i + 1) * 6], expected)
    assert abs(batch.advantages.mean()) < 1e-8


@settings(deadline=None, max_examples=5)
@given(seed=st.integers(min_value=0, max_value=2 ** 32))
def test_training_is_deterministic(seed):
    cfg = TrainConfig(iterations=2, episodes_per_iteration=3, horizon=8, epochs_per_iteration=2,
                      minibatch_size=8, hidden_sizes=[8, 8], eval_episodes=0)
    policy_a, records_a = train(cfg, seed=seed)
    policy_b, records_b = train(cfg, seed=seed)
    assert records_a == records_b
    assert encode_checkpoint(policy_a) == encode_checkpoint(policy_b)
    assert all(r.lambda_ >= 0.0 for r in records_a)


def test_zero_iterations_returns_initial_policy(small_train_config, tmp_path):
    cfg = small_train_config.model_copy(update={'iterations': 0})
    path = tmp_path / "policy.ckpt"
    policy, records = train(cfg, seed=0, checkpoint_path=path)
    assert records == []
    assert path.exists()


def test_training_records_callback(small_train_config):
    seen = []
    _, records = train(small_train_config, seed=5, on_iteration=seen.append)
    assert seen == records
    assert [r.iter for r in records] == [0, 1]
    for r in records:
        assert 0.0 <= r.mean_cost <= 1.0
        assert r.mean_cost_undiscounted >= 0.0


def test_surrogate_does_not_decrease_with_small_steps(small_policy, plant, task):
    cfg = TrainConfig(horizon=10, episodes_per_iteration=4, epochs_per_iteration=6, minibatch_size=1024,
                      learning_rate=1e-6)
    batch = collect_rollouts(small_policy, plant, task, cfg, 1.0, np.random.default_rng(0))
    optimizer = torch.optim.Adam(small_policy.parameters(), lr=cfg.learning_rate)
    history = ppo_update(small_policy, optimizer, batch, cfg, np.random.default_rng(1))
    assert len(history) == 6
    for before, after in zip(history, history[1:]):
        assert after >= before - 1e-9


def test_terminal_cost_is_penalized_but_not_in_dual_signal(small_policy, plant, task):
    cfg = TrainConfig(horizon=1, episodes_per_iteration=1)
    start = np.array([[8.99, 3.0, 5.0, 0.0]])
    batch = collect_rollouts(small_policy, plant, task, cfg, 2.0, np.random.default_rng(0),
                             initial_states=start, deterministic=True)
    traj = batch.trajectories[0]
    assert traj.costs.tolist() == [0, 1]
    assert batch.rewards[0] == pytest.approx(traj.rewards[1] - 2.0)
    assert episode_discounted_cost(traj, cfg.gamma, 1) == 0.0
