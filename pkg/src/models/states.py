from dataclasses import dataclass, astuple
import math

import numpy as np

from src.models.errors import InvalidStateError


def _require_finite(name: str, *values: float) -> None:
    if not all(math.isfinite(v) for v in values):
        raise InvalidStateError(f"{name} に非有限値が含まれています: {values}")


@dataclass(frozen=True)
class OuterState:
    """
    並進状態 (位置・速度)
    """
    p_x: float = 0.0
    v_x: float = 0.0
    p_z: float = 0.0
    v_z: float = 0.0

    def __post_init__(self):
        _require_finite("OuterState", *astuple(self))

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "OuterState":
        p_x, v_x, p_z, v_z = (float(v) for v in values)
        return cls(p_x, v_x, p_z, v_z)


@dataclass(frozen=True)
class InnerState:
    """
    姿勢状態 (ピッチ角・角速度)
    """
    theta: float = 0.0
    theta_dot: float = 0.0

    def __post_init__(self):
        _require_finite("InnerState", *astuple(self))

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "InnerState":
        theta, theta_dot = (float(v) for v in values)
        return cls(theta, theta_dot)


@dataclass(frozen=True)
class FullState:
    outer: OuterState = OuterState()
    inner: InnerState = InnerState()

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.outer.to_array(), self.inner.to_array()])

    @classmethod
    def from_array(cls, values) -> "FullState":
        values = np.asarray(values, dtype=np.float64)
        return cls(OuterState.from_array(values[:4]), InnerState.from_array(values[4:6]))


@dataclass(frozen=True)
class PolicyAction:
    """
    方策の出力: ホバー推力からの増分と指令ピッチ角
    """
    delta_thrust: float = 0.0
    theta_ref: float = 0.0

    def __post_init__(self):
        _require_finite("PolicyAction", *astuple(self))

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)


@dataclass(frozen=True)
class InnerInput:
    moment: float = 0.0

    def __post_init__(self):
        _require_finite("InnerInput", self.moment)
