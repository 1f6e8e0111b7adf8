from typing import Optional

from pydantic import BaseModel, Field, computed_field, model_validator


class IssEstimate(BaseModel):
    """
    ISS 追従定数と参照変動の見積もり

    alpha, beta は追従誤差の漸化式 e_t <= alpha e_{t-1} + beta d_t の定数、
    D は d_seq の総和、L は縮約カーネルの TV-Lipschitz 定数。
    """
    alpha: float = Field(gt=0.0, lt=1.0)
    beta: float = Field(ge=0.0)
    e0: float = Field(ge=0.0)
    d_seq: list[float] = Field(default_factory=list)
    P_weight: float = Field(default=1.0, gt=0.0)
    L: float = Field(ge=0.0)

    @model_validator(mode='after')
    def _check_sequence(self) -> 'IssEstimate':
        if any(d < 0 for d in self.d_seq):
            raise ValueError("d_seq は非負である必要があります")
        return self

    @property
    def D(self) -> float:
        return float(sum(self.d_seq))

    @property
    def transfer_penalty(self) -> float:
        """L/(1-alpha) * (e0 + beta D)"""
        return self.L / (1.0 - self.alpha) * (self.e0 + self.beta * self.D)


class SafetyCertificate(BaseModel):
    delta: float
    bound: float
    horizon: int
    iss: IssEstimate
    vacuous: bool
    # certify() が埋める経験的比較
    reduced_failure_probability: Optional[float] = None
    reduced_delta_exceeded: Optional[bool] = None
    empirical_safe_probability: Optional[float] = None
    n_episodes: Optional[int] = None
    seeds: Optional[str] = None
    empirical_below_bound: Optional[bool] = None
    note: str = "ISS 定数はロールアウトからの当てはめ値であり、証明書はデータ条件付き"


class OracleInstance(BaseModel):
    """
    有限 MDP 1 インスタンス分の全列挙結果
    """
    seed: int
    trajectory_tv: float
    sum_step_tv: float
    event_gap: float
    p_unsafe_K: float
    p_unsafe_R: float
    expected_cost_K: float
    expected_cost_R: float
    lemma_holds: bool
    event_holds: bool
    union_holds: bool

    @computed_field
    @property
    def passed(self) -> bool:
        return self.lemma_holds and self.event_holds and self.union_holds


class OracleReport(BaseModel):
    instances: list[OracleInstance]
    tolerance: float
    mutant: bool = False

    @computed_field
    @property
    def passed(self) -> bool:
        return all(instance.passed for instance in self.instances)
