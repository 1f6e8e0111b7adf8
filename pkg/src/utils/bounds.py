"""
追従誤差の ISS 定数の当てはめと、転移後の安全確率の下界
"""
from dataclasses import dataclass
import math
from typing import Callable, Optional, Sequence

import numpy as np
from loguru import logger
from scipy.stats import norm

from src.config import CertifyConfig, ControllerConfig, PlantConfig, TaskConfig, TrainConfig
from src.models.certificate import IssEstimate, SafetyCertificate
from src.models.errors import (DegenerateKernelError, DomainError, HorizonMismatchError,
                               InfeasibleFitError, InvalidTrajectoryError)
from src.models.trajectory import Trajectory
from src.utils.cmdp_trainer import collect_rollouts
from src.utils.inner_loop import GainSpec
from src.utils.policy import ActorCritic
from src.utils.sampler import InitialStateSampler
from src.utils.seeding import derive_seed, make_rng
from src.utils.transfer_evaluator import DeploymentSetup, deploy_batch, failure_probability

FEASIBILITY_TOL = 1e-12


@dataclass(frozen=True)
class TrackingStats:
    """
    e_seq[t]: ステップ t の重み付き追従誤差の標本平均 (t = 0..T-1)
    d_seq[t-1]: ステップ t の参照変動の標本平均 (t = 1..T-1)
    """
    e_seq: np.ndarray
    d_seq: np.ndarray

    @property
    def e0(self) -> float:
        return float(self.e_seq[0])


def tracking_stats(trajs: Sequence[Trajectory], P_weight: float = 1.0, rate_weight: float = 0.0) -> TrackingStats:
    """
    ||x - x_ref||_P をエピソード平均する。rate_weight > 0 のとき角速度誤差も
    (参照側は内側ループの参照角速度推定として) ノルムに含める。

    Raises:
        InvalidTrajectoryError: 空、または内側状態のない軌道
        HorizonMismatchError: ホライズン長が揃っていない
    """
    if not trajs:
        raise InvalidTrajectoryError("空のエピソード集合です")
    horizons = {t.horizon for t in trajs}
    if len(horizons) != 1:
        raise HorizonMismatchError(f"ホライズン長が揃っていません: {sorted(horizons)}")
    if not all(t.has_inner for t in trajs):
        raise InvalidTrajectoryError("追従誤差には内側状態が必要です")
    T = horizons.pop()

    theta = np.stack([t.inner[:T, 0] for t in trajs])
    theta_ref = np.stack([t.actions[:, 1] for t in trajs])
    squared = P_weight * (theta - theta_ref) ** 2
    if rate_weight > 0.0:
        if not all(t.ref_rates is not None for t in trajs):
            raise InvalidTrajectoryError("角速度誤差には参照角速度推定が必要です")
        rate = np.stack([t.inner[:T, 1] for t in trajs])
        ref_rate = np.stack([t.ref_rates for t in trajs])
        squared = squared + rate_weight * (rate - ref_rate) ** 2
    e_seq = np.sqrt(squared).mean(axis=0)
    d_seq = (math.sqrt(P_weight) * np.abs(np.diff(theta_ref, axis=1))).mean(axis=0)
    return TrackingStats(e_seq=e_seq, d_seq=d_seq)


def _check_sequences(e_seq: np.ndarray, d_seq: np.ndarray) -> None:
    if e_seq.ndim != 1 or e_seq.size < 2:
        raise DomainError("e_seq は長さ 2 以上が必要です")
    if d_seq.shape != (e_seq.size - 1,):
        raise HorizonMismatchError(f"d_seq の長さ {d_seq.size} が len(e_seq) - 1 = {e_seq.size - 1} と一致しません")
    if np.any(e_seq < 0) or np.any(d_seq < 0):
        raise DomainError("e_seq, d_seq は非負である必要があります")


def iss_beta(e_seq: Sequence[float], d_seq: Sequence[float], alpha: float) -> Optional[float]:
    """
    alpha を固定したときの最小の beta。d_t = 0 のステップで e_t > alpha e_{t-1} なら None
    """
    e, d = np.asarray(e_seq, dtype=np.float64), np.asarray(d_seq, dtype=np.float64)
    _check_sequences(e, d)
    residual = e[1:] - alpha * e[:-1]
    moving = d > 0
    if np.any(residual[~moving] > FEASIBILITY_TOL):
        return None
    if not moving.any():
        return 0.0
    return max(0.0, float(np.max(residual[moving] / d[moving])))


def fit_iss(e_seq: Sequence[float], d_seq: Sequence[float], alpha_step: float = 1e-3) -> tuple[float, float]:
    """
    全ステップで e_t <= alpha e_{t-1} + beta d_t を満たす (alpha, beta) のうち
    (e0 + beta D) / (1 - alpha) が最小のものを alpha の格子走査で求める。同値なら小さい alpha。

    Raises:
        InfeasibleFitError: 開区間 (0, 1) のどの alpha でも実行不能
    """
    e, d = np.asarray(e_seq, dtype=np.float64), np.asarray(d_seq, dtype=np.float64)
    _check_sequences(e, d)
    if not 0.0 < alpha_step < 1.0:
        raise DomainError(f"alpha_step は (0, 1) の範囲: {alpha_step}")

    alphas = np.arange(1, math.ceil(1.0 / alpha_step)) * alpha_step
    alphas = alphas[alphas < 1.0]
    residual = e[None, 1:] - alphas[:, None] * e[None, :-1]
    moving = d > 0
    feasible = np.all(residual[:, ~moving] <= FEASIBILITY_TOL, axis=1)
    if not feasible.any():
        # alpha が最大のときに残る違反が原因のステップ
        step = int(np.flatnonzero(~moving & (residual[-1] > FEASIBILITY_TOL))[0]) + 1
        raise InfeasibleFitError(
            f"ステップ {step} で参照変動が 0 なのに追従誤差が増加しています "
            f"(e={e[step - 1]:.6g} -> {e[step]:.6g})", step=step)

    if moving.any():
        betas = np.maximum(0.0, np.max(residual[:, moving] / d[moving], axis=1))
    else:
        betas = np.zeros_like(alphas)
    objective = np.where(feasible, (e[0] + betas * d.sum()) / (1.0 - alphas), np.inf)
    k = int(np.argmin(objective))
    alpha, beta = float(alphas[k]), float(betas[k])

    slack = e[1:] - (alpha * e[:-1] + beta * d)
    assert np.all(slack <= 1e-9 * max(1.0, float(e.max()))), "当てはめ結果が制約を満たしていません"
    logger.debug(f"ISS 当てはめ: alpha={alpha:.3f}, beta={beta:.6g}, 係数={objective[k]:.6g}")
    return alpha, beta


def gaussian_tv(mean_gap: float, sigma: float) -> float:
    """
    分散の等しい 1 次元ガウス分布間の厳密な TV 距離 2 Phi(gap / 2 sigma) - 1
    """
    if sigma <= 0.0:
        raise DegenerateKernelError("sigma = 0 のカーネルでは TV が退化します")
    return float(2.0 * norm.cdf(abs(mean_gap) / (2.0 * sigma)) - 1.0)


def pinsker_tv_bound(mean_gap: float, sigma: float) -> float:
    """Pinsker の不等式による上界 ||mu - mu'|| / (2 sigma)"""
    if sigma <= 0.0:
        raise DegenerateKernelError("sigma = 0 のカーネルでは TV が退化します")
    return abs(mean_gap) / (2.0 * sigma)


def lipschitz_L(params: PlantConfig, task: TaskConfig = TaskConfig()) -> float:
    """
    縮約カーネルの指令ピッチに関する TV-Lipschitz 定数 L = G dt / (2 sigma)

    G は加速度平均 F/m (sin theta, cos theta) - (0, g) の theta_ref 感度のノルムの上界。
    感度は F/m (cos theta, -sin theta) でノルムは F/m なので G = F_max/m。
    """
    if params.noise_sigma <= 0.0:
        raise DegenerateKernelError(
            "noise_sigma = 0 の決定論的カーネルでは TV-Lipschitz 定数が定義できません。"
            "証明には noise_sigma > 0 を指定してください")
    f_max = params.hover_thrust + task.delta_thrust_max
    G = f_max / params.m
    return G * params.dt / (2.0 * params.noise_sigma)


def iss_envelope(iss: IssEstimate, horizon: int) -> np.ndarray:
    """
    e_t の上界 alpha^t e0 + beta sum_{l=1}^t alpha^{t-l} d_l を t = 0..horizon-1 で並べる
    """
    envelope = np.zeros(horizon)
    current = iss.e0
    for t in range(horizon):
        if t > 0:
            d_t = iss.d_seq[t - 1] if t - 1 < len(iss.d_seq) else 0.0
            current = iss.alpha * current + iss.beta * d_t
        envelope[t] = current
    return envelope


def step_mismatch_bound(iss: IssEstimate, t: int) -> float:
    """
    ステップ t+1 の 1 ステップ TV ずれの上界 L (alpha^t e0 + beta sum alpha^{t-l} d_l)

    t = 0 では和は空で L e0。d_seq の範囲外は 0 とみなす。
    """
    if t < 0:
        raise DomainError(f"t は非負: {t}")
    total = iss.alpha ** t * iss.e0
    for ell, d_ell in enumerate(iss.d_seq[:t], start=1):
        total += iss.beta * iss.alpha ** (t - ell) * d_ell
    return iss.L * total


def safety_lower_bound(iss: IssEstimate, delta: float, horizon: int = 0) -> SafetyCertificate:
    """
    全次元系の安全確率の下界 1 - delta - L / (1 - alpha) * (e0 + beta D)

    Raises:
        DomainError: alpha が (0, 1) にない、または delta が (0, 1] にない
    """
    if not 0.0 < iss.alpha < 1.0:
        raise DomainError(f"alpha は (0, 1) の範囲である必要があります: {iss.alpha}")
    if not 0.0 < delta <= 1.0:
        raise DomainError(f"delta は (0, 1] の範囲である必要があります: {delta}")
    bound = 1.0 - delta - iss.transfer_penalty
    return SafetyCertificate(delta=delta, bound=bound, horizon=horizon, iss=iss, vacuous=bound <= 0.0)


def required_reduced_delta(iss: IssEstimate, target_delta: float) -> float:
    """
    全次元系で安全確率 1 - target_delta を保証するのに縮約モデルで必要な許容値
    target_delta - L / (1 - alpha) * (e0 + beta D)

    Raises:
        DomainError: 結果が 0 以下 (縮約側の許容値では追従誤差の項を補えない)
    """
    if not 0.0 < target_delta < 1.0:
        raise DomainError(f"target_delta は (0, 1) の範囲: {target_delta}")
    delta = target_delta - iss.transfer_penalty
    if delta <= 0.0:
        raise DomainError(f"追従誤差の項 {iss.transfer_penalty:.4g} が target_delta {target_delta} 以上です")
    return delta


def reduced_failure_probability(policy: ActorCritic, plant: PlantConfig, task: TaskConfig,
                                initial_outer: np.ndarray, horizon: int, deterministic: bool, seed: int) -> float:
    """
    縮約モデル (同じ雑音) 上の失敗確率。下界の 1 - delta の項が前提とする量
    """
    cfg = TrainConfig(horizon=horizon, episodes_per_iteration=initial_outer.shape[0])
    batch = collect_rollouts(policy, plant, task, cfg, 0.0, make_rng(seed, 'certify', 2),
                             initial_states=initial_outer, deterministic=deterministic)
    return failure_probability(batch.trajectories)


def certify(policy: ActorCritic, gains: GainSpec, plant: PlantConfig, task: TaskConfig,
            sampler: InitialStateSampler, delta: float, horizon: int,
            cfg: CertifyConfig = CertifyConfig(),
            controller: ControllerConfig = ControllerConfig(),
            on_trajectory: Optional[Callable[[str, Trajectory], None]] = None) -> SafetyCertificate:
    """
    計測付き閉ループロールアウト -> tracking_stats -> fit_iss -> lipschitz_L -> safety_lower_bound

    経験的な安全確率も同じロールアウトから求め、証明の下界を下回れば警告する。
    下界の前提 (縮約モデルでの失敗確率 <= delta) も同じ初期状態で縮約モデルを回して推定し、並べて報告する。
    on_trajectory には先頭 cfg.export_episodes 本の閉ループ軌道を渡す。

    Raises:
        DegenerateKernelError: plant.noise_sigma = 0
        InfeasibleFitError: ISS 定数が当てはまらない (証明は出さない)
    """
    L = lipschitz_L(plant, task)
    setup = DeploymentSetup(plant, task, controller, horizon, cfg.deterministic_policy)
    n, seed = sampler.episodes, sampler.seed
    initial_states = sampler.sample_full(n, make_rng(seed, 'certify'))
    rngs = [make_rng(seed, 'certify', 1, i) for i in range(n)]
    seeds = [derive_seed(seed, 'certify', 1, i) for i in range(n)]
    logger.info(f"証明用ロールアウト: {n} エピソード, sigma={plant.noise_sigma}, "
                f"omega_n={gains.omega_n}, zeta={gains.zeta}")
    trajs = [t for t in deploy_batch(policy, gains, initial_states, setup, rngs, seeds) if t is not None]
    if not trajs:
        raise InvalidTrajectoryError("有効なエピソードがありません")
    if on_trajectory is not None:
        for i, traj in enumerate(trajs[:cfg.export_episodes]):
            on_trajectory(f"certify_ep{i:03d}", traj)

    stats = tracking_stats(trajs, cfg.P_weight, cfg.rate_weight)
    try:
        alpha, beta = fit_iss(stats.e_seq, stats.d_seq, cfg.alpha_step)
    except InfeasibleFitError as e:
        logger.error(f"ISS 定数の当てはめに失敗したため証明を出しません: {e}")
        raise
    iss = IssEstimate(alpha=alpha, beta=beta, e0=stats.e0, d_seq=stats.d_seq.tolist(),
                      P_weight=cfg.P_weight, L=L)
    certificate = safety_lower_bound(iss, delta, horizon)

    empirical = 1.0 - failure_probability(trajs)
    reduced_failure = reduced_failure_probability(policy, plant, task, initial_states[:, :4], horizon,
                                                  cfg.deterministic_policy, seed)
    certificate = certificate.model_copy(update={
        'reduced_failure_probability': reduced_failure,
        'reduced_delta_exceeded': reduced_failure > delta,
        'empirical_safe_probability': empirical,
        'n_episodes': len(trajs),
        'seeds': f"master={seed}, stream=certify, episodes 0..{n - 1}",
        'empirical_below_bound': empirical < certificate.bound,
    })
    logger.info(f"下界 {certificate.bound:.4f} (vacuous={certificate.vacuous}), 経験的安全確率 {empirical:.4f}")
    if certificate.reduced_delta_exceeded:
        logger.warning(f"縮約モデルでの失敗確率 {reduced_failure:.4f} が delta = {delta} を超えています。"
                       "下界の前提が満たされていません")
    if certificate.empirical_below_bound:
        logger.warning("経験的安全確率が下界を下回りました。当てはめた仮定が標本上で破れています")
    return certificate
