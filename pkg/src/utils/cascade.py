from abc import ABC, abstractmethod
import math
from typing import Optional

import numpy as np
from loguru import logger

from src.models.errors import InvalidStateError, InvalidTrajectoryError
from src.models.reports import PropertyReport, PropertyViolation
from src.models.states import FullState, InnerState, OuterState, PolicyAction
from src.models.trajectory import SafeSetSpec, Trajectory


class FullOrderSystem(ABC):
    """
    全次元カスケード系: 外側状態 S と内側状態 X を持ち、入力は (推力, 内側入力)
    """
    @abstractmethod
    def step(self, s: FullState, thrust: float, moment: float,
             rng: Optional[np.random.Generator] = None) -> FullState:
        ...


class ReducedOrderSystem(ABC):
    """
    縮約モデル: 内側状態を参照入力として扱う
    """
    @abstractmethod
    def step(self, s: OuterState, a: PolicyAction,
             rng: Optional[np.random.Generator] = None) -> OuterState:
        ...


class ClosedLoopSystem(ABC):
    """
    全次元系 + 内側追従制御器
    """
    @abstractmethod
    def step(self, s: FullState, a: PolicyAction, filter_state,
             rng: Optional[np.random.Generator] = None):
        ...


def is_safe(s: OuterState, spec: SafeSetSpec = SafeSetSpec()) -> bool:
    """
    並進状態が安全集合内か判定 (p_x のみに依存)
    """
    if not all(math.isfinite(v) for v in (s.p_x, s.v_x, s.p_z, s.v_z)):
        raise InvalidStateError(f"非有限な状態です: {s}")
    return spec.contains(s)


def safety_cost(s: OuterState, spec: SafeSetSpec = SafeSetSpec()) -> int:
    return 0 if is_safe(s, spec) else 1


def episode_is_unsafe(traj: Trajectory) -> bool:
    if traj is None or traj.costs.size == 0:
        raise InvalidTrajectoryError("空の軌道です")
    return bool(traj.costs.sum() >= 1)


def check_cascade_property(full_system: FullOrderSystem, samples: int, rng_seed: int,
                           tolerance: float = 0.0) -> PropertyReport:
    """
    内側状態の遷移が外側状態に依存しないことを検査

    同じ (x, u) と同じ乱数で、異なる外側状態から 1 ステップ進め、内側の次状態を比較する。
    """
    rng = np.random.default_rng(rng_seed)
    report = PropertyReport(name="cascade", samples=samples)
    for i in range(samples):
        inner = InnerState(*rng.uniform(-1.0, 1.0, size=2))
        outer_a = OuterState(*rng.uniform(-10.0, 10.0, size=4))
        outer_b = OuterState(*rng.uniform(-10.0, 10.0, size=4))
        thrust = float(rng.uniform(5.0, 15.0))
        moment = float(rng.uniform(-1.0, 1.0))
        noise_seed = int(rng.integers(2 ** 32))

        next_a = full_system.step(FullState(outer_a, inner), thrust, moment, np.random.default_rng(noise_seed))
        next_b = full_system.step(FullState(outer_b, inner), thrust, moment, np.random.default_rng(noise_seed))
        deviation = float(np.max(np.abs(next_a.inner.to_array() - next_b.inner.to_array())))
        report.max_deviation = max(report.max_deviation, deviation)
        if deviation > tolerance:
            report.violations.append(PropertyViolation(
                sample=i, deviation=deviation,
                detail=f"x={inner}, 外側 {outer_a} と {outer_b} で内側遷移が異なる"))

    if report.violations:
        logger.warning(f"カスケード構造の違反: {len(report.violations)}/{samples} サンプル")
    else:
        logger.info(f"カスケード構造を確認しました ({samples} サンプル)")
    return report
