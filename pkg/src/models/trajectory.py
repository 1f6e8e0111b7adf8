from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from src.models.errors import InvalidTrajectoryError
from src.models.states import OuterState

TRAJECTORY_COLUMNS = ['t', 'p_x', 'v_x', 'p_z', 'v_z', 'theta', 'theta_dot',
                      'dF', 'theta_ref', 'reward', 'cost']


@dataclass(frozen=True)
class SafeSetSpec:
    """
    安全集合 {p_x <= boundary} (境界を含む)
    """
    boundary: float = 9.0

    def contains(self, s: OuterState) -> bool:
        return s.p_x <= self.boundary

    def cost_array(self, outer: np.ndarray) -> np.ndarray:
        """(..., 4) の並進状態配列に対する安全コスト 1{p_x > boundary}"""
        return (np.asarray(outer)[..., 0] > self.boundary).astype(np.int64)


@dataclass(frozen=True)
class Trajectory:
    """
    1 エピソード分の記録

    状態は T+1 個 (t = 0..T)、行動は T 個。報酬とコストは各状態 s_t に対して記録する。
    縮約モデルでのロールアウトでは inner は None。ref_rates は内側ループが使った参照角速度推定 (T 個)。
    """
    outer: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    inner: Optional[np.ndarray] = None
    ref_rates: Optional[np.ndarray] = None
    seed: int = 0
    saturated_steps: int = 0

    def __post_init__(self):
        for name in ('outer', 'actions', 'rewards', 'costs', 'inner', 'ref_rates'):
            value = getattr(self, name)
            if value is not None:
                dtype = np.int64 if name == 'costs' else np.float64
                object.__setattr__(self, name, np.array(value, dtype=dtype))
        T = self.actions.shape[0] if self.actions.ndim == 2 else -1
        if T < 1:
            raise InvalidTrajectoryError("空の軌道です")
        if self.outer.shape != (T + 1, 4):
            raise InvalidTrajectoryError(f"状態数 {self.outer.shape[0]} が T+1 = {T + 1} と一致しません")
        if self.rewards.shape != (T + 1,) or self.costs.shape != (T + 1,):
            raise InvalidTrajectoryError("報酬・コストの長さが状態数と一致しません")
        if self.inner is not None and self.inner.shape != (T + 1, 2):
            raise InvalidTrajectoryError("内側状態の長さが状態数と一致しません")
        if not np.isin(self.costs, (0, 1)).all():
            raise InvalidTrajectoryError("コストは {0, 1} のみ許されます")
        if self.ref_rates is not None and self.ref_rates.shape != (T,):
            raise InvalidTrajectoryError("参照角速度推定の長さが T と一致しません")
        for array in (self.outer, self.actions, self.rewards, self.costs, self.inner, self.ref_rates):
            if array is not None:
                array.setflags(write=False)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def has_inner(self) -> bool:
        return self.inner is not None

    def to_frame(self) -> pd.DataFrame:
        T = self.horizon
        inner = self.inner if self.inner is not None else np.full((T + 1, 2), np.nan)
        actions = np.vstack([self.actions, np.full((1, 2), np.nan)])
        return pd.DataFrame({
            't': np.arange(T + 1),
            'p_x': self.outer[:, 0], 'v_x': self.outer[:, 1],
            'p_z': self.outer[:, 2], 'v_z': self.outer[:, 3],
            'theta': inner[:, 0], 'theta_dot': inner[:, 1],
            'dF': actions[:, 0], 'theta_ref': actions[:, 1],
            'reward': self.rewards, 'cost': self.costs,
        }, columns=TRAJECTORY_COLUMNS)

    def to_csv(self, path: Path) -> None:
        # 内側状態がない場合は空欄で出力
        self.to_frame().to_csv(path, index=False, na_rep='')
