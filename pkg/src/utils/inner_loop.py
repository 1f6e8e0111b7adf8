"""
内側ループ: 参照角速度を一次遅れフィルタで推定する PD ピッチ制御器
"""
from dataclasses import dataclass, replace
import math
from typing import Optional

import numpy as np
from loguru import logger

from src.config import ControllerConfig
from src.models.errors import DomainError
from src.models.states import FullState, InnerInput, InnerState, PolicyAction
from src.utils.cascade import ClosedLoopSystem
from src.utils.quadrotor import QuadParams, full_step, full_step_array


@dataclass(frozen=True)
class GainSpec:
    """
    (omega_n, zeta) によるゲインの表現。Kp, Kd は常にその場で計算する
    """
    omega_n: float
    zeta: float
    J_in: float

    @property
    def Kp(self) -> float:
        return self.J_in * self.omega_n ** 2

    @property
    def Kd(self) -> float:
        return 2.0 * self.J_in * self.zeta * self.omega_n


def gains_from(omega_n: float, zeta: float, J_in: float) -> GainSpec:
    if omega_n <= 0 or zeta <= 0 or J_in <= 0:
        raise DomainError(f"omega_n, zeta, J_in は正である必要があります: ({omega_n}, {zeta}, {J_in})")
    return GainSpec(float(omega_n), float(zeta), float(J_in))


@dataclass(frozen=True)
class FilterState:
    """
    参照角速度推定フィルタの状態

    prev_ref が None の間は最初の参照で初期化する (最初の差分は 0)。
    """
    T_f: float = 0.1
    dt: float = 0.05
    prev_ref: Optional[float] = None
    rate_est: float = 0.0

    @property
    def alpha_f(self) -> float:
        return math.exp(-self.dt / self.T_f)


def filter_update(fs: FilterState, theta_ref: float, dt: Optional[float] = None) -> tuple[FilterState, float]:
    dt = fs.dt if dt is None else dt
    if dt <= 0:
        raise DomainError(f"dt は正である必要があります: {dt}")
    alpha_f = math.exp(-dt / fs.T_f)
    prev_ref = theta_ref if fs.prev_ref is None else fs.prev_ref
    raw = (theta_ref - prev_ref) / dt
    rate_est = alpha_f * fs.rate_est + (1.0 - alpha_f) * raw
    return replace(fs, dt=dt, prev_ref=theta_ref, rate_est=rate_est), rate_est


def pd_moment_array(inner: np.ndarray, theta_ref: np.ndarray, rate_est: np.ndarray,
                    Kp: float, Kd: float, moment_max: float) -> tuple[np.ndarray, np.ndarray]:
    """
    PD 則 M = -Kp(theta - theta_ref) - Kd(theta_dot - rate_est) を飽和させて返す

    Returns:
        (モーメント (N,), 飽和したかどうか (N,))
    """
    moment = -Kp * (inner[:, 0] - theta_ref) - Kd * (inner[:, 1] - rate_est)
    saturated = np.abs(moment) > moment_max
    return np.clip(moment, -moment_max, moment_max), saturated


def pd_control(x: InnerState, theta_ref: float, rate_est: float, gains: GainSpec,
               moment_max: float = ControllerConfig().moment_max) -> InnerInput:
    moment, saturated = pd_moment_array(x.to_array()[None, :], np.array([theta_ref]), np.array([rate_est]),
                                        gains.Kp, gains.Kd, moment_max)
    if saturated[0]:
        logger.debug(f"ピッチモーメントが飽和しました: theta={x.theta:.4f}, theta_ref={theta_ref:.4f}")
    return InnerInput(float(moment[0]))


def closed_loop_step(s: FullState, a: PolicyAction, fs: FilterState, gains: GainSpec,
                     params: QuadParams, rng: Optional[np.random.Generator] = None,
                     moment_max: float = ControllerConfig().moment_max) -> tuple[FullState, FilterState]:
    """
    フィルタ更新 -> PD 制御 -> 全次元モデルの 1 ステップ
    """
    fs, rate_est = filter_update(fs, a.theta_ref, params.dt)
    u = pd_control(s.inner, a.theta_ref, rate_est, gains, moment_max)
    return full_step(s, params.hover_thrust + a.delta_thrust, u.moment, params, rng), fs


@dataclass
class ClosedLoopBatch:
    """
    N エピソード分の閉ループ状態をまとめて進めるためのバッファ
    """
    state: np.ndarray
    prev_ref: np.ndarray
    rate_est: np.ndarray

    @classmethod
    def start(cls, state: np.ndarray) -> "ClosedLoopBatch":
        n = state.shape[0]
        return cls(np.array(state, dtype=np.float64), np.full(n, np.nan), np.zeros(n))


class CascadeClosedLoop(ClosedLoopSystem):
    """
    全次元クアッドロータ + PD 内側ループ
    """
    def __init__(self, gains: GainSpec, params: QuadParams = QuadParams(),
                 controller: ControllerConfig = ControllerConfig()):
        self.gains = gains
        self.params = params
        self.controller = controller

    def initial_filter(self) -> FilterState:
        return FilterState(T_f=self.controller.T_f, dt=self.params.dt)

    def step(self, s, a, filter_state, rng=None):
        return closed_loop_step(s, a, filter_state, self.gains, self.params, rng, self.controller.moment_max)

    def step_batch(self, batch: ClosedLoopBatch, action: np.ndarray,
                   noise: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
        """
        バッチ版の閉ループ更新 (batch をその場で更新)

        noise は並進加速度に加える (N, 2) の雑音。エピソードごとの乱数列から呼び出し側で引く。

        Returns:
            (使用した参照角速度推定 (N,), 飽和フラグ (N,))
        """
        dt = self.params.dt
        alpha_f = math.exp(-dt / self.controller.T_f)
        theta_ref = action[:, 1]
        prev_ref = np.where(np.isnan(batch.prev_ref), theta_ref, batch.prev_ref)
        raw = (theta_ref - prev_ref) / dt
        batch.rate_est = alpha_f * batch.rate_est + (1.0 - alpha_f) * raw
        batch.prev_ref = theta_ref.copy()

        moment, saturated = pd_moment_array(batch.state[:, 4:6], theta_ref, batch.rate_est,
                                            self.gains.Kp, self.gains.Kd, self.controller.moment_max)
        thrust = self.params.hover_thrust + action[:, 0]
        batch.state = full_step_array(batch.state, thrust, moment, self.params, noise)
        return batch.rate_est.copy(), saturated
