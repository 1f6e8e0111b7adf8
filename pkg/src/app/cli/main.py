import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from loguru import logger

from src.config import RunConfig
from src.models.errors import (CascadeError, CheckpointError, ConfigError, DegenerateKernelError,
                               InfeasibleFitError, OracleSizeError, TrainingAbortedError)
from src.utils.bounds import certify
from src.utils.cmdp_trainer import train
from src.utils.data_recorder import DataRecorder, create_session_dir
from src.utils.inner_loop import gains_from
from src.utils.mdp_oracle import run_oracle
from src.utils.policy import describe_checkpoint, load_checkpoint
from src.utils.sampler import InitialStateSampler
from src.utils.transfer_evaluator import DeploymentSetup, sample_episodes, sweep

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class Application:
    """
    設定の読み込み、学習、ゲインスイープ、安全証明、オラクル検査をまとめて実行する
    """
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = RunConfig.load(args.config, seed=args.seed, jobs=args.jobs)
        if args.out is not None:
            self.config.io = self.config.io.model_copy(update={'out_dir': Path(args.out)})

        # 出力先が未指定なら日時ごとのディレクトリ
        out_dir = self.config.io.out_dir
        self.session_dir = Path(out_dir) if out_dir is not None else create_session_dir()
        self.session_dir.mkdir(parents=True, exist_ok=True)
        self.sink_id = logger.add(self.session_dir / "run.log", level="INFO", encoding="utf-8")
        self.data_recorder = DataRecorder(self.session_dir, self.config)

    def run(self) -> int:
        logger.info(f"{self.args.command} を開始します (seed={self.config.seed}, 出力先 {self.session_dir})")
        self.data_recorder.save_resolved_config()
        return getattr(self, f"cmd_{self.args.command}")()

    def _checkpoint_path(self) -> Path:
        if self.args.checkpoint is not None:
            return Path(self.args.checkpoint)
        return self.session_dir / self.config.io.checkpoint

    def _load_policy(self):
        path = self._checkpoint_path()
        if not path.exists():
            raise FileNotFoundError(f"チェックポイントが見つかりません: {path}")
        policy, checkpoint_id = load_checkpoint(path)
        logger.info(f"チェックポイントを読み込みました: {path} ({checkpoint_id})")
        return policy, checkpoint_id

    def cmd_train(self) -> int:
        cfg = self.config
        _, records = train(cfg.train, cfg.plant, cfg.task, cfg.seed,
                           checkpoint_path=self._checkpoint_path(),
                           on_iteration=self.data_recorder.record_training)
        self.data_recorder.save_training_log()
        if records and records[-1].mean_cost > cfg.train.delta:
            logger.warning(f"最終イテレーションの割引コスト {records[-1].mean_cost:.4f} が "
                           f"delta = {cfg.train.delta} を超えています")
        return EXIT_OK

    def cmd_sweep(self) -> int:
        cfg = self.config
        policy, checkpoint_id = self._load_policy()
        deterministic = cfg.sweep.deterministic_policy
        if self.args.deterministic_policy is not None:
            deterministic = self.args.deterministic_policy
        setup = DeploymentSetup(cfg.plant, cfg.task, cfg.controller, cfg.train.horizon, deterministic)
        sampler = InitialStateSampler.from_task(cfg.task, cfg.sweep.episodes, cfg.seed)
        report = sweep(policy, cfg.sweep.omega_n, cfg.sweep.zeta, sampler, setup, jobs=cfg.workers,
                       checkpoint_id=checkpoint_id, config=json.loads(cfg.resolved_json()))
        self.data_recorder.save_sweep(report)
        for result in report.results:
            trajs = sample_episodes(policy, result.omega_n, result.zeta, sampler, setup, cfg.sweep.export_episodes)
            for i, traj in enumerate(trajs):
                if traj is not None:
                    name = f"omega{result.omega_n:g}_zeta{result.zeta:g}_ep{i:03d}"
                    self.data_recorder.record_trajectory(name, traj)
        self.data_recorder.save_trajectories()
        return EXIT_OK

    def cmd_certify(self) -> int:
        cfg = self.config
        cert = cfg.certify
        if cert.noise_sigma <= 0.0:
            raise DegenerateKernelError(
                "certify.noise_sigma = 0 では遷移核が決定論的で TV 距離が退化するため、"
                "TV-Lipschitz 定数 L が定義できません。noise_sigma > 0 を指定してください")
        policy, _ = self._load_policy()
        deterministic = cert.deterministic_policy
        if self.args.deterministic_policy is not None:
            deterministic = self.args.deterministic_policy
        plant = cfg.plant.model_copy(update={'noise_sigma': cert.noise_sigma})
        sampler = InitialStateSampler.from_task(cfg.task, cert.episodes, cfg.seed)
        certificate = certify(
            policy, gains_from(cert.omega_n, cert.zeta, plant.J_in), plant, cfg.task, sampler,
            delta=cert.delta if cert.delta is not None else cfg.train.delta,
            horizon=cfg.train.horizon,
            cfg=cert.model_copy(update={'deterministic_policy': deterministic}),
            controller=cfg.controller,
            on_trajectory=self.data_recorder.record_trajectory,
        )
        self.data_recorder.save_certificate(certificate)
        self.data_recorder.save_trajectories()
        if certificate.empirical_below_bound:
            logger.error("経験的安全確率が下界を下回りました")
            return EXIT_FAILURE
        return EXIT_OK

    def cmd_oracle(self) -> int:
        args = self.args
        seeds = range(args.first_seed, args.first_seed + args.count)
        report = run_oracle(seeds, args.states, args.actions, args.horizon,
                            mutant=args.mutant, identical=args.identical)
        self.data_recorder.save_oracle_report(report)
        return EXIT_OK if report.passed else EXIT_FAILURE

    def cmd_describe(self) -> int:
        path = self._checkpoint_path()
        if not path.exists():
            raise FileNotFoundError(f"チェックポイントが見つかりません: {path}")
        info = describe_checkpoint(path)
        print(f"magic: {info['magic']}  version: {info['version']}  tensors: {len(info['tensors'])}")
        for tensor in info['tensors']:
            print(f"  {tensor['name']}: {tuple(tensor['shape'])}")
        print(f"checksum: {info['checksum']} ({'ok' if info['checksum_ok'] else 'MISMATCH'})")
        return EXIT_OK if info['checksum_ok'] else EXIT_USAGE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade-safety",
                                     description="縮約モデルで学習した安全方策のカスケード系への転移評価")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="設定ファイル (TOML または resolved_config.json)")
    common.add_argument("--checkpoint", type=Path, default=None)
    common.add_argument("--out", type=Path, default=None, help="出力ディレクトリ")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=None)
    common.add_argument("--deterministic-policy", action=argparse.BooleanOptionalAction, default=None,
                        help="平均行動で展開する (--no-deterministic-policy で確率的)")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "sweep", "certify", "describe"):
        sub.add_parser(name, parents=[common])
    oracle = sub.add_parser("oracle", parents=[common])
    oracle.add_argument("--first-seed", type=int, default=0)
    oracle.add_argument("--count", type=int, default=20)
    oracle.add_argument("--states", type=int, default=3)
    oracle.add_argument("--actions", type=int, default=2)
    oracle.add_argument("--horizon", type=int, default=4)
    oracle.add_argument("--mutant", action="store_true", help="符号を反転した上界で検査 (ハーネスの自己検査)")
    oracle.add_argument("--identical", action="store_true", help="P_R = P_K の一致核で検査")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    アプリケーション起動。終了コード 0: 成功, 1: 不変条件の違反, 2: 使い方・設定・入力のエラー
    """
    args = build_parser().parse_args(argv)
    # ログの設定
    sink_ids = [logger.add(
        "logs/app_{time}.log",
        rotation="1 day",
        retention="7 days",
        level="INFO",
        encoding="utf-8"
    )]
    try:
        app = Application(args)
        sink_ids.append(app.sink_id)
        return app.run()
    except (FileNotFoundError, ConfigError, CheckpointError, DegenerateKernelError, OracleSizeError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAbortedError, InfeasibleFitError, AssertionError) as e:
        logger.error(f"不変条件の違反で中断しました: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except CascadeError as e:
        logger.exception(f"実行に失敗しました: {e}")
        return EXIT_FAILURE
    finally:
        logger.info("アプリケーションを終了します")
        for sink_id in sink_ids:
            logger.remove(sink_id)


if __name__ == '__main__':
    sys.exit(main())
