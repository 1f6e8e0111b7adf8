from datetime import datetime
from pathlib import Path
from typing import Optional

import pandas as pd
from loguru import logger

from src.config import RunConfig
from src.models.certificate import OracleReport, SafetyCertificate
from src.models.reports import TrainingRecord, TransferReport
from src.models.trajectory import Trajectory
from src.utils.transfer_evaluator import heatmap_grids, sweep_frame

TRAINING_COLUMNS = ['iter', 'mean_return', 'mean_cost', 'lambda', 'policy_std', 'mean_cost_undiscounted']


def create_session_dir(root: Path = Path("output")) -> Path:
    """
    日時ごとの出力ディレクトリを作成
    """
    session_dir = root / datetime.now().strftime("%Y%m%d_%H%M%S")
    session_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"セッションディレクトリを作成しました: {session_dir}")
    return session_dir


class DataRecorder:
    """
    学習ログ、スイープ結果、証明などの成果物を出力ディレクトリへ保存するクラス
    """
    def __init__(self, session_dir: Path, config: Optional[RunConfig] = None):
        self.session_dir = Path(session_dir)
        self.session_dir.mkdir(parents=True, exist_ok=True)
        self.config = config or RunConfig()
        self.training_records: list[TrainingRecord] = []
        self.trajectories: dict[str, Trajectory] = {}

    def path(self, name: str) -> Path:
        return self.session_dir / name

    def record_training(self, record: TrainingRecord) -> None:
        self.training_records.append(record)

    def record_trajectory(self, name: str, traj: Trajectory) -> None:
        self.trajectories[name] = traj

    def save_resolved_config(self) -> Path:
        """実行ごとに解決済みの設定を成果物と並べて残す"""
        path = self.path(self.config.io.resolved_config)
        path.write_text(self.config.resolved_json(), encoding='utf-8')
        return path

    def save_training_log(self) -> Path:
        rows = [r.model_dump(by_alias=True) for r in self.training_records]
        path = self.path(self.config.io.training_log)
        pd.DataFrame(rows, columns=TRAINING_COLUMNS).to_csv(path, index=False)
        logger.info(f"学習ログを保存しました: {path} ({len(rows)} 行)")
        return path

    def save_sweep(self, report: TransferReport) -> Path:
        """
        スイープ CSV と、指標ごとのヒートマップ用格子 CSV (heatmaps/<指標>.csv)
        """
        path = self.path(self.config.io.sweep_csv)
        sweep_frame(report).to_csv(path, index=False)
        heatmap_dir = self.path('heatmaps')
        heatmap_dir.mkdir(exist_ok=True)
        for metric, grid in heatmap_grids(report).items():
            grid.to_csv(heatmap_dir / f"{metric}.csv", index=False)
        self.path('sweep_report.json').write_text(report.model_dump_json(indent=2), encoding='utf-8')
        logger.info(f"スイープ結果を保存しました: {path}")
        return path

    def save_certificate(self, certificate: SafetyCertificate) -> Path:
        path = self.path(self.config.io.certificate)
        path.write_text(certificate.model_dump_json(indent=2), encoding='utf-8')
        logger.info(f"証明を保存しました: {path}")
        return path

    def save_oracle_report(self, report: OracleReport) -> Path:
        path = self.path(self.config.io.oracle_report)
        path.write_text(report.model_dump_json(indent=2), encoding='utf-8')
        logger.info(f"オラクルの結果を保存しました: {path}")
        return path

    def save_trajectories(self) -> None:
        if not self.trajectories:
            return
        trajectory_dir = self.path('trajectories')
        trajectory_dir.mkdir(exist_ok=True)
        for name, traj in self.trajectories.items():
            traj.to_csv(trajectory_dir / f"{name}.csv")
        logger.info(f"軌道 {len(self.trajectories)} 本を保存しました: {trajectory_dir}")
