import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.models.errors import ConfigError


class Section(BaseModel):
    # 未知のキーは拒否 (ハイパーパラメータの綴り間違いを黙って通さない)
    model_config = ConfigDict(extra='forbid', frozen=True)


class PlantConfig(Section):
    """
    平面クアッドロータの物理パラメータ ([plant])
    """
    m: float = Field(default=1.0, gt=0.0)
    g: float = 9.81
    J_in: float = Field(default=0.02, gt=0.0)
    dt: float = Field(default=0.05, gt=0.0)
    noise_sigma: float = Field(default=0.0, ge=0.0)

    @property
    def hover_thrust(self) -> float:
        return self.m * self.g


class TaskConfig(Section):
    """
    タスク定義 ([task]): 安全集合、ゴール、行動の上下限、初期状態分布
    """
    boundary: float = 9.0
    goal: tuple[float, float] = (9.0, 9.0)
    goal_radius: float = Field(default=0.1, gt=0.0)
    goal_bonus: float = 10.0
    distance_scale: float = Field(default=100.0, gt=0.0)
    delta_thrust_max: float = Field(default=5.0, gt=0.0)
    theta_ref_max: float = Field(default=0.5, gt=0.0)
    px_grid: list[float] = Field(default_factory=lambda: [float(i) for i in range(1, 9)])
    pz_grid: list[float] = Field(default_factory=lambda: [float(i) for i in range(1, 10)])
    velocity_range: float = Field(default=1.0, ge=0.0)


class ControllerConfig(Section):
    """
    内側ループ PD 制御器 ([controller])
    """
    T_f: float = Field(default=0.1, gt=0.0)
    moment_max: float = Field(default=10.0, gt=0.0)


class TrainConfig(Section):
    """
    PPO-Lagrangian の学習設定 ([train])
    """
    delta: float = Field(default=0.025, gt=0.0, lt=1.0)
    gamma: float = Field(default=0.994, gt=0.0, le=1.0)
    lambda0: float = Field(default=1.0, ge=0.0)
    eta_lambda: float = Field(default=0.02, ge=0.0)
    learning_rate: float = Field(default=4e-4, gt=0.0)
    clip_range: float = Field(default=0.05, gt=0.0)
    gae_lambda: float = Field(default=0.95, ge=0.0, le=1.0)
    horizon: int = Field(default=300, ge=1)
    iterations: int = Field(default=500, ge=0)
    episodes_per_iteration: int = Field(default=32, ge=1)
    epochs_per_iteration: int = Field(default=10, ge=1)
    minibatch_size: int = Field(default=1024, ge=1)
    hidden_sizes: list[int] = Field(default_factory=lambda: [64, 64])
    log_std_init: float = -0.5
    value_coef: float = Field(default=0.5, ge=0.0)
    max_grad_norm: Optional[float] = 0.5
    eval_episodes: int = Field(default=100, ge=0)

    @field_validator('log_std_init')
    @classmethod
    def _log_std_range(cls, v: float) -> float:
        if not -5.0 <= v <= 1.0:
            raise ValueError("log_std_init は [-5, 1] の範囲で指定してください")
        return v


class SweepConfig(Section):
    """
    ゲインスイープ ([sweep])
    """
    omega_n: list[float] = Field(default_factory=lambda: [float(w) for w in range(2, 13)])
    zeta: list[float] = Field(default_factory=lambda: [round(0.1 * k, 1) for k in range(2, 11)])
    episodes: int = Field(default=100, ge=1)
    deterministic_policy: bool = True
    # 各ゲイン組の先頭から trajectories/ に書き出すエピソード数
    export_episodes: int = Field(default=1, ge=0)

    @field_validator('omega_n', 'zeta')
    @classmethod
    def _positive(cls, values: list[float]) -> list[float]:
        if not values or any(v <= 0 for v in values):
            raise ValueError("ゲイン格子は空でない正の値のリストである必要があります")
        return values


class CertifyConfig(Section):
    """
    安全確率下界の証明 ([certify])
    """
    noise_sigma: float = Field(default=0.05, ge=0.0)
    omega_n: float = Field(default=12.0, gt=0.0)
    zeta: float = Field(default=1.0, gt=0.0)
    episodes: int = Field(default=500, ge=1)
    delta: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    alpha_step: float = Field(default=1e-3, gt=0.0, lt=1.0)
    P_weight: float = Field(default=1.0, gt=0.0)
    rate_weight: float = Field(default=0.0, ge=0.0)
    deterministic_policy: bool = True
    export_episodes: int = Field(default=1, ge=0)


class IoConfig(Section):
    out_dir: Optional[Path] = None
    checkpoint: str = "policy.ckpt"
    training_log: str = "training_log.csv"
    sweep_csv: str = "sweep.csv"
    certificate: str = "certificate.json"
    oracle_report: str = "oracle_report.json"
    resolved_config: str = "resolved_config.json"


class RunConfig(BaseSettings):
    """
    実行設定 (設定ファイル > 環境変数 CST_* > .env > 既定値)
    """
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    jobs: Optional[int] = Field(default=None, ge=1)
    plant: PlantConfig = PlantConfig()
    task: TaskConfig = TaskConfig()
    controller: ControllerConfig = ControllerConfig()
    train: TrainConfig = TrainConfig()
    sweep: SweepConfig = SweepConfig()
    certify: CertifyConfig = CertifyConfig()
    io: IoConfig = IoConfig()

    model_config = SettingsConfigDict(
        env_prefix='CST_',
        env_nested_delimiter='__',
        env_file='.env',
        # .env の未知キーは無視。設定ファイルの未知キーは load() で拒否
        extra='ignore',
    )

    @model_validator(mode='after')
    def _hover_positive(self) -> 'RunConfig':
        # 推力増分の下限でもホバー推力が正であること
        if self.plant.hover_thrust - self.task.delta_thrust_max < 0:
            raise ValueError("delta_thrust_max がホバー推力を超えています")
        return self

    @property
    def workers(self) -> int:
        return self.jobs or os.cpu_count() or 1

    @classmethod
    def load(cls, path: Optional[Path] = None, **overrides) -> 'RunConfig':
        """
        TOML (または resolved_config.json) を読み込んで検証

        Raises:
            FileNotFoundError: ファイルが存在しない場合
            ConfigError: 構文エラー (行番号付き) または検証エラー
        """
        data: dict = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"設定ファイルが見つかりません: {path}")
            text = path.read_text(encoding='utf-8')
            try:
                data = json.loads(text) if path.suffix == '.json' else tomllib.loads(text)
            except tomllib.TOMLDecodeError as e:
                # メッセージに "(at line X, column Y)" が含まれる
                raise ConfigError(f"{path}: {e}") from e
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
            unknown = sorted(set(data) - set(cls.model_fields))
            if unknown:
                raise ConfigError(f"{path}: 未知の設定キーです: {', '.join(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**data)
        except ValidationError as e:
            raise ConfigError(f"{path}: {e}" if path is not None else str(e)) from e

    def resolved_json(self) -> str:
        return self.model_dump_json(indent=2)
