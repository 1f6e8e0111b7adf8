"""
縮約モデルで学習した方策を全次元の閉ループ系へゼロショットで展開し、
(omega_n, zeta) のゲインスイープで失敗確率と追従誤差を集計する
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import itertools
import multiprocessing
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from loguru import logger

from src.config import ControllerConfig, PlantConfig, TaskConfig
from src.models.errors import InvalidTrajectoryError, NumericalError
from src.models.reports import GainResult, TransferReport
from src.models.trajectory import SafeSetSpec, Trajectory
from src.utils.cascade import episode_is_unsafe
from src.utils.cmdp_trainer import reward_array
from src.utils.inner_loop import CascadeClosedLoop, ClosedLoopBatch, GainSpec, gains_from
from src.utils.policy import ActorCritic, clip_actions
from src.utils.sampler import InitialStateSampler
from src.utils.seeding import derive_seed, make_rng

SWEEP_COLUMNS = ['omega_n', 'zeta', 'p_fail', 'mean_err', 'mean_ref_var', 'sat_freq', 'n_episodes']
HEATMAP_METRICS = ['p_fail', 'mean_err', 'mean_ref_var', 'sat_freq']


@dataclass(frozen=True)
class DeploymentSetup:
    """
    展開に必要な設定一式 (ワーカープロセスへそのまま渡す)
    """
    plant: PlantConfig = PlantConfig()
    task: TaskConfig = TaskConfig()
    controller: ControllerConfig = ControllerConfig()
    horizon: int = 300
    deterministic: bool = True


def episode_rngs(seed: int, stream: str, n: int) -> list[np.random.Generator]:
    """エピソード i 専用の乱数列 (ゲイン組をまたいで同じものを使う)"""
    return [make_rng(seed, stream, 1, i) for i in range(n)]


def deploy_batch(policy: ActorCritic, gains: GainSpec, initial_states: np.ndarray, setup: DeploymentSetup,
                 rngs: Optional[Sequence[np.random.Generator]] = None,
                 seeds: Optional[Sequence[int]] = None) -> list[Optional[Trajectory]]:
    """
    N エピソードの閉ループ展開をまとめて実行

    各エピソードは自分専用の乱数列 rngs[i] から探索雑音と過程雑音を引くため、
    バッチの組み方に結果が依存しない。数値破綻したエピソードは None を返す。
    """
    n, T = initial_states.shape[0], setup.horizon
    sigma = setup.plant.noise_sigma
    if (not setup.deterministic or sigma > 0) and (rngs is None or len(rngs) != n):
        raise ValueError("確率的な展開にはエピソードごとの乱数生成器が必要です")
    loop = CascadeClosedLoop(gains, setup.plant, setup.controller)
    batch = ClosedLoopBatch.start(initial_states)

    states = np.zeros((n, T + 1, 6))
    actions = np.zeros((n, T, 2))
    ref_rates = np.zeros((n, T))
    saturated = np.zeros(n, dtype=np.int64)
    valid = np.ones(n, dtype=bool)
    states[:, 0] = batch.state

    with np.errstate(all='ignore'):
        for t in range(T):
            raw = policy.mean_action(batch.state[:, :4])
            if not setup.deterministic:
                raw = raw + policy.std * np.stack([rng.standard_normal(2) for rng in rngs])
            actions[:, t] = clip_actions(raw, setup.task.delta_thrust_max, setup.task.theta_ref_max)
            noise = np.stack([sigma * rng.standard_normal(2) for rng in rngs]) if sigma > 0 else None
            ref_rates[:, t], sat = loop.step_batch(batch, actions[:, t], noise)
            saturated += sat
            valid &= np.all(np.isfinite(batch.state), axis=1) & np.all(np.isfinite(actions[:, t]), axis=1)
            # 破綻したエピソードは以降 0 に固定して他のエピソードの計算を続ける
            batch.state[~valid] = 0.0
            states[:, t + 1] = batch.state

    outer = states[:, :, :4]
    rewards = reward_array(outer, setup.task)
    costs = SafeSetSpec(setup.task.boundary).cost_array(outer)
    trajectories: list[Optional[Trajectory]] = []
    for i in range(n):
        if not valid[i]:
            logger.warning(f"エピソード {i} が数値的に破綻したため除外します (omega_n={gains.omega_n}, zeta={gains.zeta})")
            trajectories.append(None)
            continue
        if saturated[i]:
            logger.debug(f"エピソード {i}: モーメント飽和 {saturated[i]} ステップ")
        trajectories.append(Trajectory(
            outer=outer[i], actions=actions[i], rewards=rewards[i], costs=costs[i],
            inner=states[i, :, 4:6], ref_rates=ref_rates[i],
            seed=int(seeds[i]) if seeds is not None else 0, saturated_steps=int(saturated[i]),
        ))
    return trajectories


def deploy_episode(policy: ActorCritic, gains: GainSpec, initial_state: np.ndarray, setup: DeploymentSetup,
                   rng: Optional[np.random.Generator] = None, seed: int = 0) -> Trajectory:
    """
    1 エピソードの展開

    Raises:
        NumericalError: 全次元モデルの数値が破綻した場合
    """
    traj = deploy_batch(policy, gains, np.asarray(initial_state, dtype=np.float64)[None, :], setup,
                        [rng] if rng is not None else None, [seed])[0]
    if traj is None:
        raise NumericalError("閉ループ展開が数値的に破綻しました")
    return traj


def failure_probability(trajs: Sequence[Trajectory]) -> float:
    if not trajs:
        raise InvalidTrajectoryError("空のエピソード集合です")
    return sum(episode_is_unsafe(t) for t in trajs) / len(trajs)


def _tracking_errors(traj: Trajectory) -> np.ndarray:
    if not traj.has_inner:
        raise InvalidTrajectoryError("縮約モデルの軌道には内側状態がありません")
    return np.abs(traj.inner[:traj.horizon, 0] - traj.actions[:, 1])


def mean_tracking_error(trajs: Sequence[Trajectory]) -> float:
    """
    エピソードごとの (1/T) sum |theta_t - theta_ref_t| のエピソード平均
    """
    if not trajs:
        raise InvalidTrajectoryError("空のエピソード集合です")
    return float(np.mean([_tracking_errors(t).mean() for t in trajs]))


def reference_variation(traj: Trajectory) -> float:
    """sum_{t>=1} |theta_ref_t - theta_ref_{t-1}|"""
    return float(np.abs(np.diff(traj.actions[:, 1])).sum())


def evaluate_gain_pair(policy: ActorCritic, omega_n: float, zeta: float, initial_states: np.ndarray,
                       setup: DeploymentSetup, seed: int) -> GainResult:
    gains = gains_from(omega_n, zeta, setup.plant.J_in)
    n = initial_states.shape[0]
    seeds = [derive_seed(seed, 'sweep', 1, i) for i in range(n)]
    trajs = deploy_batch(policy, gains, initial_states, setup, episode_rngs(seed, 'sweep', n), seeds)
    valid = [t for t in trajs if t is not None]
    if not valid:
        raise NumericalError(f"(omega_n={omega_n}, zeta={zeta}) の全エピソードが破綻しました")

    flags = [episode_is_unsafe(t) if t is not None else None for t in trajs]
    result = GainResult(
        omega_n=omega_n, zeta=zeta,
        p_fail=failure_probability(valid),
        mean_err=mean_tracking_error(valid),
        mean_ref_var=float(np.mean([reference_variation(t) for t in valid])),
        sat_freq=sum(t.saturated_steps for t in valid) / (len(valid) * setup.horizon),
        n_episodes=len(valid),
        n_invalid=n - len(valid),
        unsafe_flags=flags,
        max_errors=[float(_tracking_errors(t).max()) if t is not None else None for t in trajs],
    )
    recount = sum(f for f in flags if f is not None) / result.n_episodes
    assert result.p_fail == recount, f"p_fail {result.p_fail} が再集計 {recount} と一致しません"
    logger.info(f"omega_n={omega_n:g}, zeta={zeta:g}: p_fail={result.p_fail:.3f}, "
                f"mean_err={result.mean_err:.4f}, sat_freq={result.sat_freq:.4f}")
    return result


def sample_episodes(policy: ActorCritic, omega_n: float, zeta: float, sampler: InitialStateSampler,
                    setup: DeploymentSetup, count: int) -> list[Optional[Trajectory]]:
    """
    sweep のゲイン組 (omega_n, zeta) の先頭 count エピソードを同じ初期状態と乱数列で再展開 (軌道 CSV 用)
    """
    count = min(count, sampler.episodes)
    if count <= 0:
        return []
    initial_states = sampler.sample_full(sampler.episodes, make_rng(sampler.seed, 'sweep'))[:count]
    seeds = [derive_seed(sampler.seed, 'sweep', 1, i) for i in range(count)]
    gains = gains_from(omega_n, zeta, setup.plant.J_in)
    return deploy_batch(policy, gains, initial_states, setup, episode_rngs(sampler.seed, 'sweep', count), seeds)


def _worker_init() -> None:
    torch.set_num_threads(1)


def _evaluate_job(args) -> GainResult:
    return evaluate_gain_pair(*args)


def dominance_anomalies(results: Sequence[GainResult]) -> list[str]:
    """
    共有エピソードすべてで最大追従誤差が小さい (以下) のに失敗確率が高いゲイン組を列挙

    理論は傾向を予測するだけなので、報告のみで失敗扱いにはしない。
    """
    anomalies = []
    errors = [np.array([np.nan if e is None else e for e in r.max_errors]) for r in results]
    for (i, a), (j, b) in itertools.permutations(enumerate(results), 2):
        shared = ~np.isnan(errors[i]) & ~np.isnan(errors[j])
        if not shared.any() or a.p_fail <= b.p_fail:
            continue
        if np.all(errors[i][shared] <= errors[j][shared]):
            anomalies.append(
                f"({a.omega_n:g}, {a.zeta:g}) は ({b.omega_n:g}, {b.zeta:g}) より追従が良いのに "
                f"p_fail が高い ({a.p_fail:.3f} > {b.p_fail:.3f})")
    return anomalies


def sweep(policy: ActorCritic, omega_grid: Sequence[float], zeta_grid: Sequence[float],
          sampler: InitialStateSampler, setup: DeploymentSetup, jobs: int = 1,
          checkpoint_id: str = "", config: Optional[dict] = None) -> TransferReport:
    """
    ゲイン格子の各組で同じ N 個の初期状態と乱数列 (共通乱数) を使って評価

    結果は完了順に関係なく格子順 (omega_n 外側, zeta 内側) に並ぶ。
    """
    pairs = [(float(w), float(z)) for w in omega_grid for z in zeta_grid]
    if not pairs:
        raise ValueError("ゲイン格子が空です")
    initial_states = sampler.sample_full(sampler.episodes, make_rng(sampler.seed, 'sweep'))
    args = [(policy, w, z, initial_states, setup, sampler.seed) for w, z in pairs]
    logger.info(f"スイープ開始: {len(pairs)} ゲイン組 x {sampler.episodes} エピソード (jobs={jobs})")

    if jobs <= 1:
        previous = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            results = [_evaluate_job(a) for a in args]
        finally:
            torch.set_num_threads(previous)
    else:
        context = multiprocessing.get_context('spawn')
        with ProcessPoolExecutor(max_workers=jobs, mp_context=context, initializer=_worker_init) as executor:
            results = list(executor.map(_evaluate_job, args))

    anomalies = dominance_anomalies(results)
    for message in anomalies:
        logger.warning(f"支配関係の逆転: {message}")
    return TransferReport(results=results, seed=sampler.seed, checkpoint_id=checkpoint_id,
                          config=config or {}, anomalies=anomalies)


def sweep_frame(report: TransferReport) -> pd.DataFrame:
    rows = [{column: getattr(r, column) for column in SWEEP_COLUMNS} for r in report.results]
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def heatmap_grids(report: TransferReport, metrics: Iterable[str] = HEATMAP_METRICS) -> dict[str, pd.DataFrame]:
    """
    指標ごとに omega_n x zeta の密な格子 (omega_n, zeta, value) を作る
    """
    frame = sweep_frame(report)
    omegas = sorted(frame['omega_n'].unique())
    zetas = sorted(frame['zeta'].unique())
    dense = pd.MultiIndex.from_product([omegas, zetas], names=['omega_n', 'zeta'])
    grids = {}
    for metric in metrics:
        values = frame.set_index(['omega_n', 'zeta'])[metric].reindex(dense)
        grids[metric] = values.rename('value').reset_index()
    return grids
