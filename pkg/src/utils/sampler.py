from dataclasses import dataclass

import numpy as np

from src.config import TaskConfig


@dataclass(frozen=True)
class InitialStateSampler:
    """
    初期状態の分布: 位置は整数格子上の一様、速度は [-v, v] の一様、姿勢は 0

    学習 (縮約モデル) と展開 (全次元モデル) で同じ分布を使う。
    """
    px_grid: tuple[float, ...] = tuple(float(i) for i in range(1, 9))
    pz_grid: tuple[float, ...] = tuple(float(i) for i in range(1, 10))
    velocity_range: float = 1.0
    episodes: int = 100
    seed: int = 0

    @classmethod
    def from_task(cls, task: TaskConfig, episodes: int = 100, seed: int = 0) -> "InitialStateSampler":
        return cls(tuple(task.px_grid), tuple(task.pz_grid), task.velocity_range, episodes, seed)

    def sample_outer(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """並進状態 (n, 4) をサンプル"""
        p_x = rng.choice(np.asarray(self.px_grid, dtype=np.float64), size=n)
        p_z = rng.choice(np.asarray(self.pz_grid, dtype=np.float64), size=n)
        v = rng.uniform(-self.velocity_range, self.velocity_range, size=(n, 2))
        return np.stack([p_x, v[:, 0], p_z, v[:, 1]], axis=1)

    def sample_full(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """全次元状態 (n, 6)。姿勢と角速度は厳密に 0"""
        return np.concatenate([self.sample_outer(n, rng), np.zeros((n, 2))], axis=1)
