from typing import Optional


class CascadeError(Exception):
    """
    本パッケージで送出する例外の基底クラス
    """


class InvalidStateError(CascadeError):
    """状態に非有限値が含まれる"""


class InvalidTrajectoryError(CascadeError):
    """軌道が空、または長さが不整合"""


class InputError(CascadeError):
    """入力が物理的に許されない (負の推力など)"""


class NumericalError(CascadeError):
    """積分結果が非有限になった"""


class DomainError(CascadeError):
    """関数の定義域外の引数"""


class HorizonMismatchError(CascadeError):
    """ホライズン長が一致しない"""


class InfeasibleFitError(CascadeError):
    """
    ISS 定数 (alpha, beta) の実行可能解が存在しない

    Attributes:
        step: 制約を破ったステップ番号
    """
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class DegenerateKernelError(CascadeError):
    """決定論的カーネルでは TV-Lipschitz 定数が定義できない"""


class OracleSizeError(CascadeError):
    """全列挙するには状態・行動空間が大きすぎる"""


class CheckpointError(CascadeError):
    """チェックポイントのマジック、バージョン、チェックサムの不一致"""


class ConfigError(CascadeError):
    """設定ファイルの読み込み・検証エラー"""


class TrainingAbortedError(CascadeError):
    """学習中に非有限値が現れたため中断"""
