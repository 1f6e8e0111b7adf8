"""
縮約モデル上の制約付き MDP を PPO-Lagrangian で学習する

報酬は r - lambda * c に置き換え、lambda は割引付き正規化コストによる双対上昇で更新する。
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from loguru import logger

from src.config import PlantConfig, TaskConfig, TrainConfig
from src.models.errors import HorizonMismatchError, TrainingAbortedError
from src.models.reports import TrainingRecord
from src.models.states import OuterState
from src.models.trajectory import SafeSetSpec, Trajectory
from src.utils.policy import ActorCritic, clip_actions, save_checkpoint
from src.utils.quadrotor import draw_noise, reduced_step_array
from src.utils.sampler import InitialStateSampler
from src.utils.seeding import derive_seed, make_rng


def reward_array(outer: np.ndarray, task: TaskConfig = TaskConfig()) -> np.ndarray:
    """
    r = -(ゴールまでの距離^2)/100 + 10 * 1{距離 < 0.1}
    """
    dx = outer[..., 0] - task.goal[0]
    dz = outer[..., 2] - task.goal[1]
    dist = np.hypot(dx, dz)
    return -(dx ** 2 + dz ** 2) / task.distance_scale + task.goal_bonus * (dist < task.goal_radius)


def reward(s: OuterState, goal: tuple[float, float] = (9.0, 9.0), task: TaskConfig = TaskConfig()) -> float:
    task = task.model_copy(update={'goal': tuple(goal)})
    return float(reward_array(s.to_array(), task))


def penalized_reward(r: float, c: int, lam: float) -> float:
    return r - lam * c


def episode_discounted_cost(traj: Trajectory, gamma: float, T: int) -> float:
    """
    (1/T) sum_{t=0}^{T-1} gamma^t c_t
    """
    if traj.horizon != T:
        raise HorizonMismatchError(f"軌道のホライズン {traj.horizon} が T = {T} と一致しません")
    discounts = gamma ** np.arange(T)
    return float(np.dot(discounts, traj.costs[:T]) / T)


def episode_cost(traj: Trajectory) -> int:
    """割引なしの累積コスト sum_{t=0}^{T} c_t"""
    return int(traj.costs.sum())


@dataclass(frozen=True)
class DualState:
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"ラグランジュ乗数は非負である必要があります: {self.lam}")


def dual_update(d: DualState, mean_cost: float, cfg: TrainConfig) -> DualState:
    """
    lambda <- max(0, lambda + eta (C - delta))
    """
    return DualState(max(0.0, d.lam + cfg.eta_lambda * (mean_cost - cfg.delta)))


@dataclass
class RolloutBatch:
    """
    1 イテレーション分のロールアウト (N エピソード x T ステップ)
    """
    obs: np.ndarray
    raw_actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    trajectories: list[Trajectory] = field(default_factory=list)

    def __len__(self) -> int:
        return self.obs.shape[0]

    @property
    def mean_return(self) -> float:
        return float(np.mean([t.rewards.sum() for t in self.trajectories]))

    def mean_cost(self, gamma: float) -> float:
        return float(np.mean([episode_discounted_cost(t, gamma, t.horizon) for t in self.trajectories]))

    @property
    def mean_cost_undiscounted(self) -> float:
        return float(np.mean([episode_cost(t) for t in self.trajectories]))


def compute_gae(rewards: np.ndarray, values: np.ndarray, gamma: float, gae_lambda: float) -> np.ndarray:
    """
    一般化アドバンテージ推定

    Args:
        rewards: (N, T) 各遷移の報酬
        values: (N, T+1) 各状態の価値 (最後の列は打ち切り時のブートストラップ)
    """
    T = rewards.shape[1]
    advantages = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[0])
    for t in reversed(range(T)):
        delta = rewards[:, t] + gamma * values[:, t + 1] - values[:, t]
        advantages[:, t] = last = delta + gamma * gae_lambda * last
    return advantages


def collect_rollouts(policy: ActorCritic, plant: PlantConfig, task: TaskConfig, cfg: TrainConfig,
                     lam: float, rng: np.random.Generator, episodes: Optional[int] = None,
                     initial_states: Optional[np.ndarray] = None, deterministic: bool = False,
                     seed: int = 0) -> RolloutBatch:
    """
    縮約モデルで N エピソードをまとめて実行し、ペナルティ付き報酬の GAE を計算

    遷移 t (s_t -> s_{t+1}) の報酬は r(s_{t+1}) - lambda c_{t+1} なので、ペナルティは c_1..c_T に掛かる。
    双対更新に使う episode_discounted_cost は c_0..c_{T-1} を数える。既定の初期格子 (p_x <= 8) では c_0 = 0 なので、
    両者の差は終端の c_T だけ。
    """
    spec = SafeSetSpec(task.boundary)
    if initial_states is None:
        n = episodes or cfg.episodes_per_iteration
        initial_states = InitialStateSampler.from_task(task).sample_outer(n, rng)
    n, T = initial_states.shape[0], cfg.horizon

    outer = np.zeros((n, T + 1, 4))
    raw = np.zeros((n, T, 2))
    outer[:, 0] = initial_states
    for t in range(T):
        raw[:, t] = policy.act(outer[:, t], rng, deterministic=deterministic)
        action = clip_actions(raw[:, t], task.delta_thrust_max, task.theta_ref_max)
        outer[:, t + 1] = reduced_step_array(outer[:, t], action, plant, draw_noise(plant, rng, n))
    if not (np.all(np.isfinite(outer)) and np.all(np.isfinite(raw))):
        raise TrainingAbortedError("ロールアウト中に非有限な状態・行動が現れました")

    state_rewards = reward_array(outer, task)
    state_costs = spec.cost_array(outer)
    # 遷移 t の報酬は到達状態 s_{t+1} で評価する
    rewards = state_rewards[:, 1:] - lam * state_costs[:, 1:]

    obs_flat = outer[:, :T].reshape(-1, 4)
    raw_flat = raw.reshape(-1, 2)
    with torch.no_grad():
        log_probs = policy.log_prob(torch.as_tensor(obs_flat), torch.as_tensor(raw_flat)).numpy()
    values = policy.values(outer.reshape(-1, 4)).reshape(n, T + 1)
    if not np.all(np.isfinite(values)):
        raise TrainingAbortedError("価値関数の出力が非有限です")

    advantages = compute_gae(rewards, values, cfg.gamma, cfg.gae_lambda)
    returns = advantages + values[:, :T]
    flat_adv = advantages.reshape(-1)
    normalized = (flat_adv - flat_adv.mean()) / (flat_adv.std() + 1e-8)

    clipped = clip_actions(raw, task.delta_thrust_max, task.theta_ref_max)
    trajectories = [
        Trajectory(outer=outer[i], actions=clipped[i], rewards=state_rewards[i], costs=state_costs[i],
                   seed=seed)
        for i in range(n)
    ]
    return RolloutBatch(
        obs=obs_flat, raw_actions=raw_flat, log_probs=log_probs, values=values[:, :T].reshape(-1),
        rewards=rewards.reshape(-1), advantages=normalized, returns=returns.reshape(-1),
        trajectories=trajectories,
    )


def clipped_surrogate(policy: ActorCritic, obs: torch.Tensor, raw_actions: torch.Tensor,
                      old_log_probs: torch.Tensor, advantages: torch.Tensor, clip_range: float) -> torch.Tensor:
    """
    mean(min(ratio * A, clip(ratio, 1-eps, 1+eps) * A))
    """
    ratio = torch.exp(policy.log_prob(obs, raw_actions) - old_log_probs)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - clip_range, 1.0 + clip_range) * advantages
    return torch.min(unclipped, clipped).mean()


def ppo_loss(policy: ActorCritic, obs: torch.Tensor, raw_actions: torch.Tensor, old_log_probs: torch.Tensor,
             advantages: torch.Tensor, returns: torch.Tensor, cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """
    最小化する損失 -surrogate + c_v * MSE(V, R) と、その時の surrogate
    """
    surrogate = clipped_surrogate(policy, obs, raw_actions, old_log_probs, advantages, cfg.clip_range)
    value_loss = torch.mean((policy.value(obs) - returns) ** 2)
    return -surrogate + cfg.value_coef * value_loss, surrogate


def ppo_update(policy: ActorCritic, optimizer: torch.optim.Optimizer, batch: RolloutBatch,
               cfg: TrainConfig, rng: np.random.Generator) -> list[float]:
    """
    クリップ付き surrogate を epochs_per_iteration 回ミニバッチで上昇させる

    Returns:
        各エポック開始時のバッチ全体の surrogate
    """
    if len(batch) == 0:
        raise TrainingAbortedError("空のバッチでは更新できません")
    obs = torch.as_tensor(batch.obs)
    raw = torch.as_tensor(batch.raw_actions)
    old_log_probs = torch.as_tensor(batch.log_probs)
    advantages = torch.as_tensor(batch.advantages)
    returns = torch.as_tensor(batch.returns)

    history = []
    for _ in range(cfg.epochs_per_iteration):
        with torch.no_grad():
            history.append(float(clipped_surrogate(policy, obs, raw, old_log_probs, advantages, cfg.clip_range)))
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), cfg.minibatch_size):
            idx = torch.as_tensor(order[start:start + cfg.minibatch_size])
            loss, _ = ppo_loss(policy, obs[idx], raw[idx], old_log_probs[idx], advantages[idx], returns[idx], cfg)
            optimizer.zero_grad()
            loss.backward()
            grads = [p.grad for p in policy.parameters() if p.grad is not None]
            if not all(torch.isfinite(g).all() for g in grads):
                raise TrainingAbortedError(f"勾配に NaN/inf が含まれます (loss={loss.item()})")
            if cfg.max_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
            optimizer.step()
            policy.clamp_log_std()
    if not policy.is_finite():
        raise TrainingAbortedError("更新後の重みが非有限です")
    return history


def evaluate_policy(policy: ActorCritic, plant: PlantConfig, task: TaskConfig, cfg: TrainConfig,
                    episodes: int, seed: int, goal_tolerance: float = 0.5) -> dict[str, float]:
    """
    縮約モデル上で平均行動を使って評価し、ゴール到達率と失敗率を返す
    """
    rng = make_rng(seed, 'eval')
    batch = collect_rollouts(policy, plant, task, cfg, 0.0, rng, episodes=episodes, deterministic=True)
    final = np.array([t.outer[-1] for t in batch.trajectories])
    reached = np.hypot(final[:, 0] - task.goal[0], final[:, 2] - task.goal[1]) < goal_tolerance
    unsafe = [t.costs.sum() >= 1 for t in batch.trajectories]
    return {'goal_reach_rate': float(np.mean(reached)), 'failure_rate': float(np.mean(unsafe))}


def train(cfg: TrainConfig, plant: PlantConfig = PlantConfig(), task: TaskConfig = TaskConfig(),
          seed: int = 0, checkpoint_path: Optional[Path] = None,
          on_iteration: Optional[Callable[[TrainingRecord], None]] = None) -> tuple[ActorCritic, list[TrainingRecord]]:
    """
    collect_rollouts -> ppo_update -> dual_update を iterations 回繰り返す
    """
    policy = ActorCritic(cfg.hidden_sizes, cfg.log_std_init, seed=derive_seed(seed, 'init'))
    optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate)
    dual = DualState(cfg.lambda0)
    update_rng = make_rng(seed, 'train')
    records: list[TrainingRecord] = []

    for k in range(cfg.iterations):
        rng = make_rng(seed, 'rollout', k)
        batch = collect_rollouts(policy, plant, task, cfg, dual.lam, rng, seed=derive_seed(seed, 'rollout', k))
        for traj in batch.trajectories:
            c = episode_discounted_cost(traj, cfg.gamma, cfg.horizon)
            assert 0.0 <= c <= 1.0, f"割引コストが [0, 1] の範囲外です: {c}"
        mean_cost = batch.mean_cost(cfg.gamma)
        ppo_update(policy, optimizer, batch, cfg, update_rng)
        dual = dual_update(dual, mean_cost, cfg)
        assert dual.lam >= 0.0

        record = TrainingRecord(
            iter=k, mean_return=batch.mean_return, mean_cost=mean_cost,
            mean_cost_undiscounted=batch.mean_cost_undiscounted, lambda_=dual.lam,
            policy_std=float(np.mean(policy.std)),
        )
        records.append(record)
        logger.info(
            f"iter {k}: return={record.mean_return:.3f} cost={record.mean_cost:.5f} "
            f"(undiscounted {record.mean_cost_undiscounted:.3f}) lambda={dual.lam:.4f} std={record.policy_std:.4f}"
        )
        if on_iteration is not None:
            on_iteration(record)

    if cfg.iterations > 0 and cfg.eval_episodes > 0:
        evaluation = evaluate_policy(policy, plant, task, cfg, cfg.eval_episodes, seed)
        logger.info(f"縮約モデルでの評価: ゴール到達率 {evaluation['goal_reach_rate']:.2%}, "
                    f"失敗率 {evaluation['failure_rate']:.2%}")
    if checkpoint_path is not None:
        save_checkpoint(policy, checkpoint_path)
    return policy, records
