from typing import Any, Optional

from pydantic import BaseModel, Field


class PropertyViolation(BaseModel):
    sample: int
    detail: str
    deviation: float


class PropertyReport(BaseModel):
    """
    仮定 (カスケード構造・外側一致) の検査結果
    """
    name: str
    samples: int
    max_deviation: float = 0.0
    violations: list[PropertyViolation] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


class TrainingRecord(BaseModel):
    iter: int
    mean_return: float
    mean_cost: float
    mean_cost_undiscounted: float
    lambda_: float = Field(alias='lambda')
    policy_std: float

    model_config = {'populate_by_name': True}


class GainResult(BaseModel):
    """
    1 つのゲイン組 (omega_n, zeta) に対するスイープ結果
    """
    omega_n: float
    zeta: float
    p_fail: float = Field(ge=0.0, le=1.0)
    mean_err: float = Field(ge=0.0)
    mean_ref_var: float
    sat_freq: float
    n_episodes: int
    n_invalid: int = 0
    unsafe_flags: list[Optional[bool]] = Field(default_factory=list)
    max_errors: list[Optional[float]] = Field(default_factory=list)


class TransferReport(BaseModel):
    results: list[GainResult]
    seed: int
    checkpoint_id: str
    config: dict[str, Any] = Field(default_factory=dict)
    anomalies: list[str] = Field(default_factory=list)

    def lookup(self, omega_n: float, zeta: float) -> Optional[GainResult]:
        for result in self.results:
            if abs(result.omega_n - omega_n) < 1e-9 and abs(result.zeta - zeta) < 1e-9:
                return result
        return None
