"""
小さな有限 MDP の組で全軌道を列挙し、軌道分布の TV と 1 ステップ TV の和、
安全事象の確率差、和集合上界の関係を厳密に確かめる
"""
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from loguru import logger

from src.models.certificate import OracleInstance, OracleReport
from src.models.errors import OracleSizeError
from src.utils.seeding import make_rng

MAX_STATE_ACTIONS = 64
MAX_HORIZON = 6
MAX_TRAJECTORIES = 2_000_000


@dataclass(frozen=True)
class FiniteMdpPair:
    """
    初期分布と方策を共有する 2 つの遷移核 P_K (実機側), P_R (縮約側)

    kernel_*[s, a, s'] は遷移確率、policy[s, a] は確率的方策、unsafe[s] は安全集合外の状態。
    """
    initial: np.ndarray
    kernel_K: np.ndarray
    kernel_R: np.ndarray
    policy: np.ndarray
    unsafe: np.ndarray
    horizon: int

    @property
    def n_states(self) -> int:
        return self.initial.shape[0]

    @property
    def n_actions(self) -> int:
        return self.policy.shape[1]

    def validate(self) -> None:
        S, A = self.n_states, self.n_actions
        if S * A > MAX_STATE_ACTIONS or not 1 <= self.horizon <= MAX_HORIZON:
            raise OracleSizeError(
                f"|S||A| = {S * A} (上限 {MAX_STATE_ACTIONS}), T = {self.horizon} (1..{MAX_HORIZON}) は列挙できません")
        if S * (S * A) ** self.horizon > MAX_TRAJECTORIES:
            raise OracleSizeError(f"軌道数 {S * (S * A) ** self.horizon} が上限 {MAX_TRAJECTORIES} を超えます")
        for name, array in (('kernel_K', self.kernel_K), ('kernel_R', self.kernel_R)):
            if array.shape != (S, A, S) or not np.allclose(array.sum(axis=2), 1.0):
                raise ValueError(f"{name} が確率核ではありません")
        if self.policy.shape != (S, A) or not np.allclose(self.policy.sum(axis=1), 1.0):
            raise ValueError("policy が確率分布ではありません")


def random_pair(seed: int, n_states: int = 3, n_actions: int = 2, horizon: int = 4,
                perturbation: float = 0.3, identical: bool = False) -> FiniteMdpPair:
    """
    seed から決まる乱数 MDP の組。P_R は P_K と別のディリクレ核との混合
    """
    rng = make_rng(seed, 'oracle')
    kernel_K = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    other = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    kernel_R = kernel_K.copy() if identical else (1.0 - perturbation) * kernel_K + perturbation * other
    unsafe = np.zeros(n_states, dtype=bool)
    unsafe[-1] = True
    return FiniteMdpPair(
        initial=rng.dirichlet(np.ones(n_states)),
        kernel_K=kernel_K,
        kernel_R=kernel_R,
        policy=rng.dirichlet(np.ones(n_actions), size=n_states),
        unsafe=unsafe,
        horizon=horizon,
    )


def two_state_pair(epsilon: float = 0.1, horizon: int = 3) -> FiniteMdpPair:
    """
    状態 0 (安全) に留まる連鎖と、1 ステップごとに確率 epsilon で状態 1 (非安全) へ移る連鎖
    """
    kernel_K = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    kernel_R = kernel_K.copy()
    kernel_R[0, 0] = [1.0 - epsilon, epsilon]
    return FiniteMdpPair(
        initial=np.array([1.0, 0.0]), kernel_K=kernel_K, kernel_R=kernel_R,
        policy=np.ones((2, 1)), unsafe=np.array([False, True]), horizon=horizon,
    )


def tv_distance(p: np.ndarray, q: np.ndarray, axis: int = -1) -> np.ndarray:
    """半 L1 の TV 距離"""
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=axis)


@dataclass(frozen=True)
class TrajectoryTable:
    """列挙した全軌道 s_0 a_0 s_1 ... s_T の確率と安全コスト"""
    prob_K: np.ndarray
    prob_R: np.ndarray
    any_unsafe: np.ndarray
    cost_sum: np.ndarray


def enumerate_trajectories(pair: FiniteMdpPair) -> TrajectoryTable:
    """
    軌道を 1 ステップずつ (行動, 次状態) で枝分かれさせて確率を掛け合わせる
    """
    pair.validate()
    S, A = pair.n_states, pair.n_actions
    prob_K = pair.initial.astype(np.float64).copy()
    prob_R = prob_K.copy()
    last = np.arange(S)
    cost_sum = pair.unsafe[last].astype(np.int64)

    for _ in range(pair.horizon):
        branch = pair.policy[last][:, :, None]
        prob_K = (prob_K[:, None, None] * branch * pair.kernel_K[last]).reshape(-1)
        prob_R = (prob_R[:, None, None] * branch * pair.kernel_R[last]).reshape(-1)
        cost_sum = np.repeat(cost_sum, A * S)
        last = np.tile(np.arange(S), last.size * A)
        cost_sum = cost_sum + pair.unsafe[last]
    return TrajectoryTable(prob_K, prob_R, cost_sum > 0, cost_sum)


def finite_mdp_oracle(pair: FiniteMdpPair, seed: int = 0, tolerance: float = 1e-12,
                      mutant: bool = False) -> OracleInstance:
    """
    全列挙で次の 3 つを確かめる

    - 軌道分布の TV <= 1 ステップ TV の最大値の T 倍
    - |P_K(安全) - P_R(安全)| <= 軌道分布の TV
    - 両核で P(いずれかのステップで非安全) <= E[コストの総和]

    mutant=True では 1 ステップ TV の和の符号を反転する (検査が誤った上界を検出できることの確認用)。
    """
    table = enumerate_trajectories(pair)
    trajectory_tv = float(tv_distance(table.prob_K, table.prob_R))
    step_tv = float(tv_distance(pair.kernel_K, pair.kernel_R).max())
    sum_step_tv = step_tv * pair.horizon * (-1.0 if mutant else 1.0)

    p_unsafe_K = float(table.prob_K[table.any_unsafe].sum())
    p_unsafe_R = float(table.prob_R[table.any_unsafe].sum())
    expected_cost_K = float(table.prob_K @ table.cost_sum)
    expected_cost_R = float(table.prob_R @ table.cost_sum)
    event_gap = abs(p_unsafe_K - p_unsafe_R)

    instance = OracleInstance(
        seed=seed,
        trajectory_tv=trajectory_tv,
        sum_step_tv=sum_step_tv,
        event_gap=event_gap,
        p_unsafe_K=p_unsafe_K,
        p_unsafe_R=p_unsafe_R,
        expected_cost_K=expected_cost_K,
        expected_cost_R=expected_cost_R,
        lemma_holds=trajectory_tv <= sum_step_tv + tolerance,
        event_holds=event_gap <= trajectory_tv + tolerance,
        union_holds=p_unsafe_K <= expected_cost_K + tolerance and p_unsafe_R <= expected_cost_R + tolerance,
    )
    if not instance.passed:
        logger.error(f"seed {seed}: 不等式が成り立ちません {instance.model_dump()}")
    return instance


def run_oracle(seeds: Iterable[int], n_states: int = 3, n_actions: int = 2, horizon: int = 4,
               tolerance: float = 1e-12, mutant: bool = False, identical: bool = False) -> OracleReport:
    instances = [
        finite_mdp_oracle(random_pair(seed, n_states, n_actions, horizon, identical=identical), seed, tolerance, mutant)
        for seed in seeds
    ]
    report = OracleReport(instances=instances, tolerance=tolerance, mutant=mutant)
    failed = sum(not i.passed for i in instances)
    logger.info(f"有限 MDP オラクル: {len(instances)} インスタンス中 {failed} 件で不等式違反")
    return report
