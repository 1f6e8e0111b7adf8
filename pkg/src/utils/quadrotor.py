"""
平面クアッドロータの全次元モデルと縮約モデル

どちらも半陰的オイラー法 (速度を先に更新し、更新後の速度で位置を進める) で離散化する。
並進加速度は同じ関数 ``translational_update`` で計算するため、姿勢が参照と一致すれば
外側の遷移はビット単位で一致する。
"""
from typing import Optional

import numpy as np
from loguru import logger

from src.config import PlantConfig
from src.models.errors import InputError, NumericalError
from src.models.reports import PropertyReport, PropertyViolation
from src.models.states import FullState, OuterState, PolicyAction
from src.utils.cascade import FullOrderSystem, ReducedOrderSystem

QuadParams = PlantConfig


def draw_noise(params: QuadParams, rng: Optional[np.random.Generator], n: int = 1) -> Optional[np.ndarray]:
    """
    並進加速度に加える i.i.d. ガウス雑音 (n, 2)。sigma = 0 なら乱数を消費しない
    """
    if params.noise_sigma <= 0.0:
        return None
    if rng is None:
        raise InputError("noise_sigma > 0 には乱数生成器が必要です")
    return params.noise_sigma * rng.standard_normal((n, 2))


def translational_update(outer: np.ndarray, thrust: np.ndarray, theta: np.ndarray,
                         params: QuadParams, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """
    並進状態 (N, 4) = [p_x, v_x, p_z, v_z] を 1 ステップ進める
    """
    a_x = thrust / params.m * np.sin(theta)
    a_z = thrust / params.m * np.cos(theta) - params.g
    if noise is not None:
        a_x = a_x + noise[:, 0]
        a_z = a_z + noise[:, 1]
    v_x = outer[:, 1] + a_x * params.dt
    v_z = outer[:, 3] + a_z * params.dt
    p_x = outer[:, 0] + v_x * params.dt
    p_z = outer[:, 2] + v_z * params.dt
    return np.stack([p_x, v_x, p_z, v_z], axis=1)


def attitude_update(inner: np.ndarray, moment: np.ndarray, params: QuadParams) -> np.ndarray:
    theta_dot = inner[:, 1] + moment / params.J_in * params.dt
    theta = inner[:, 0] + theta_dot * params.dt
    return np.stack([theta, theta_dot], axis=1)


def full_step_array(state: np.ndarray, thrust: np.ndarray, moment: np.ndarray,
                    params: QuadParams, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """
    全次元状態 (N, 6) のバッチ更新。加速度はステップ前の姿勢 theta_t から計算する
    """
    thrust = np.asarray(thrust, dtype=np.float64)
    if np.any(thrust < 0):
        raise InputError(f"推力は非負である必要があります: min={thrust.min()}")
    outer = translational_update(state[:, :4], thrust, state[:, 4], params, noise)
    inner = attitude_update(state[:, 4:6], np.asarray(moment, dtype=np.float64), params)
    return np.concatenate([outer, inner], axis=1)


def reduced_step_array(outer: np.ndarray, action: np.ndarray, params: QuadParams,
                       noise: Optional[np.ndarray] = None) -> np.ndarray:
    """
    縮約モデル (N, 4) のバッチ更新。姿勢の代わりに指令ピッチ theta_ref を使う
    """
    thrust = params.hover_thrust + action[:, 0]
    if np.any(thrust < 0):
        raise InputError(f"推力 F_hover + dF が負です: min={thrust.min()}")
    return translational_update(outer, thrust, action[:, 1], params, noise)


def full_step(s: FullState, thrust: float, moment: float, params: QuadParams,
              rng: Optional[np.random.Generator] = None) -> FullState:
    if thrust < 0:
        raise InputError(f"推力は非負である必要があります: {thrust}")
    next_state = full_step_array(s.to_array()[None, :], np.array([thrust]), np.array([moment]),
                                 params, draw_noise(params, rng))[0]
    if not np.all(np.isfinite(next_state)):
        raise NumericalError(f"全次元モデルの更新結果が非有限です: {next_state}")
    return FullState.from_array(next_state)


def reduced_step(s: OuterState, a: PolicyAction, params: QuadParams,
                 rng: Optional[np.random.Generator] = None) -> OuterState:
    next_outer = reduced_step_array(s.to_array()[None, :], a.to_array()[None, :],
                                    params, draw_noise(params, rng))[0]
    if not np.all(np.isfinite(next_outer)):
        raise NumericalError(f"縮約モデルの更新結果が非有限です: {next_outer}")
    return OuterState.from_array(next_outer)


class PlanarQuadrotor(FullOrderSystem):
    def __init__(self, params: QuadParams = QuadParams()):
        self.params = params

    def step(self, s, thrust, moment, rng=None):
        return full_step(s, thrust, moment, self.params, rng)


class ReducedQuadrotor(ReducedOrderSystem):
    def __init__(self, params: QuadParams = QuadParams()):
        self.params = params

    def step(self, s, a, rng=None):
        return reduced_step(s, a, self.params, rng)


def check_outer_matching(params: QuadParams, samples: int, rng_seed: int,
                         tolerance: float = 1e-12) -> PropertyReport:
    """
    theta = theta_ref のとき全次元モデルと縮約モデルの外側遷移が一致するか検査

    雑音ありの場合は同じ乱数列 (共通乱数) を両方に与えて比較する。
    """
    rng = np.random.default_rng(rng_seed)
    full, reduced = PlanarQuadrotor(params), ReducedQuadrotor(params)
    report = PropertyReport(name="outer_matching", samples=samples)
    for i in range(samples):
        outer = OuterState(*rng.uniform(-10.0, 10.0, size=4))
        theta = float(rng.uniform(-0.5, 0.5))
        action = PolicyAction(float(rng.uniform(-5.0, 5.0)), theta)
        state = FullState.from_array(np.concatenate([outer.to_array(), [theta, rng.uniform(-1.0, 1.0)]]))
        moment = float(rng.uniform(-1.0, 1.0))
        noise_seed = int(rng.integers(2 ** 32))

        full_next = full.step(state, params.hover_thrust + action.delta_thrust, moment,
                              np.random.default_rng(noise_seed))
        reduced_next = reduced.step(outer, action, np.random.default_rng(noise_seed))
        deviation = float(np.max(np.abs(full_next.outer.to_array() - reduced_next.to_array())))
        report.max_deviation = max(report.max_deviation, deviation)
        if deviation > tolerance:
            report.violations.append(PropertyViolation(
                sample=i, deviation=deviation, detail=f"s={outer}, a={action}"))

    logger.info(f"外側遷移の一致検査: 最大偏差 {report.max_deviation:.3e} ({samples} サンプル)")
    return report
