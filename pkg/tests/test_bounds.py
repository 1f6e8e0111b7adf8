import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from src.config import CertifyConfig, PlantConfig, TaskConfig
from src.models.certificate import IssEstimate
from src.models.errors import (DegenerateKernelError, DomainError, HorizonMismatchError, InfeasibleFitError)
from src.utils.bounds import (certify, fit_iss, gaussian_tv, iss_beta, iss_envelope, lipschitz_L,
                              pinsker_tv_bound, reduced_failure_probability, required_reduced_delta,
                              safety_lower_bound, step_mismatch_bound, tracking_stats)
from src.utils.inner_loop import gains_from
from src.utils.sampler import InitialStateSampler
from tests.conftest import make_trajectory


def _iss(**kwargs):
    values = dict(alpha=0.5, beta=1.0, e0=0.0, d_seq=[1.0], L=0.1)
    values.update(kwargs)
    return IssEstimate(**values)


def _random_iss(rng):
    return IssEstimate(alpha=rng.uniform(0.05, 0.95), beta=rng.uniform(0.0, 5.0), e0=rng.uniform(0.0, 1.0),
                       d_seq=rng.uniform(0.0, 0.2, size=int(rng.integers(1, 40))).tolist(),
                       L=rng.uniform(0.0, 3.0))


# tracking_stats

def test_tracking_stats_single_episode():
    stats = tracking_stats([make_trajectory([0, 0], theta=0.0, theta_ref=0.2)])
    assert stats.e0 == pytest.approx(0.2)


def test_tracking_stats_averages_episodes():
    a = make_trajectory([0, 0], theta=[0.0, 0.0], theta_ref=0.1)
    b = make_trajectory([0, 0], theta=[0.0, 0.0], theta_ref=0.3)
    assert tracking_stats([a, b]).e0 == pytest.approx(0.2)


def test_tracking_stats_perfect_tracking():
    stats = tracking_stats([make_trajectory([0, 0, 0, 0], theta=0.1, theta_ref=0.1)])
    assert np.all(stats.e_seq == 0.0)
    assert np.all(stats.d_seq == 0.0)
    assert stats.d_seq.shape == (2,)


def test_tracking_stats_weight_scales_norm():
    traj = make_trajectory([0, 0], theta=0.0, theta_ref=0.2)
    assert tracking_stats([traj], P_weight=4.0).e0 == pytest.approx(0.4)


def test_tracking_stats_horizon_mismatch():
    with pytest.raises(HorizonMismatchError):
        tracking_stats([make_trajectory([0, 0], theta=0.0), make_trajectory([0, 0, 0], theta=0.0)])


# fit_iss

def test_fit_iss_recovers_equality_data():
    rng = np.random.default_rng(0)
    d = rng.uniform(0.1, 1.0, size=50)
    e = [1.0]
    for d_t in d:
        e.append(0.8 * e[-1] + 0.5 * d_t)
    e = np.array(e)

    assert iss_beta(e, d, 0.8) == pytest.approx(0.5, abs=1e-6)
    alpha, beta = fit_iss(e, d)
    assert 0.0 < alpha < 1.0
    assert np.all(e[1:] <= alpha * e[:-1] + beta * d + 1e-12)
    # 最小化した係数は真の (0.8, 0.5) 以下
    assert (e[0] + beta * d.sum()) / (1 - alpha) <= (e[0] + 0.5 * d.sum()) / (1 - 0.8) + 1e-9


def test_fit_iss_zero_error():
    alpha, beta = fit_iss([0.0, 0.0, 0.0], [0.3, 0.0])
    assert beta == 0.0
    assert alpha == pytest.approx(1e-3)


def test_fit_iss_infeasible():
    with pytest.raises(InfeasibleFitError) as info:
        fit_iss([1.0, 2.0], [0.0])
    assert info.value.step == 1


def test_fit_iss_names_violating_step():
    with pytest.raises(InfeasibleFitError) as info:
        fit_iss([1.0, 0.5, 0.6, 0.1], [0.2, 0.0, 0.1])
    assert info.value.step == 2


def test_fit_iss_length_mismatch():
    with pytest.raises(HorizonMismatchError):
        fit_iss([1.0, 0.5, 0.2], [0.1])


@given(st.lists(st.floats(min_value=0.0, max_value=10.0), min_size=2, max_size=30).flatmap(
    lambda e: st.tuples(st.just(e), st.lists(st.floats(min_value=0.01, max_value=1.0),
                                             min_size=len(e) - 1, max_size=len(e) - 1))))
def test_fit_iss_output_is_feasible(data):
    e, d = map(np.array, data)
    alpha, beta = fit_iss(e, d)
    assert np.all(e[1:] <= alpha * e[:-1] + beta * d + 1e-9 * max(1.0, e.max()))


# TV と L

def test_gaussian_tv_against_pinsker():
    exact = gaussian_tv(1.0, 1.0)
    assert exact == pytest.approx(math.erf(1 / (2 * math.sqrt(2))), abs=1e-12)
    assert exact == pytest.approx(0.382925, abs=1e-6)
    assert pinsker_tv_bound(1.0, 1.0) == 0.5 >= exact


def test_identical_means_have_zero_tv():
    assert gaussian_tv(0.0, 0.3) == 0.0


def test_lipschitz_requires_noise():
    with pytest.raises(DegenerateKernelError):
        lipschitz_L(PlantConfig(noise_sigma=0.0))


def test_lipschitz_scales_inversely_with_sigma():
    task = TaskConfig()
    L1 = lipschitz_L(PlantConfig(noise_sigma=0.05), task)
    L2 = lipschitz_L(PlantConfig(noise_sigma=0.1), task)
    assert L2 == pytest.approx(L1 / 2)


def test_lipschitz_value():
    plant, task = PlantConfig(noise_sigma=0.05), TaskConfig()
    # 推力上限 9.81 + 5 N, m = 1 kg
    assert lipschitz_L(plant, task) == pytest.approx((9.81 + 5.0) * 0.05 / 0.1)


def test_lipschitz_dominates_one_step_mean_shift():
    plant, task = PlantConfig(noise_sigma=0.05), TaskConfig()
    L = lipschitz_L(plant, task)
    F = plant.hover_thrust + task.delta_thrust_max
    for a, b in [(0.0, 0.1), (-0.5, 0.5), (0.3, 0.31)]:
        shift = F / plant.m * math.hypot(math.sin(a) - math.sin(b), math.cos(a) - math.cos(b)) * plant.dt
        assert pinsker_tv_bound(shift, plant.noise_sigma) <= L * abs(a - b) + 1e-12


# 上界の代数

def test_step_bound_at_zero():
    assert step_mismatch_bound(_iss(e0=0.7, L=2.0), 0) == pytest.approx(1.4)


def test_step_bound_one_step():
    iss = _iss(L=1.0, alpha=0.5, e0=1.0, beta=1.0, d_seq=[1.0])
    assert step_mismatch_bound(iss, 1) == pytest.approx(1.5)


def test_step_bound_vanishes_without_error():
    iss = _iss(e0=0.0, d_seq=[0.0, 0.0, 0.0])
    assert all(step_mismatch_bound(iss, t) == 0.0 for t in range(4))


def test_envelope_matches_step_bound():
    iss = _random_iss(np.random.default_rng(4))
    envelope = iss_envelope(iss, len(iss.d_seq) + 1)
    for t, value in enumerate(envelope):
        assert iss.L * value == pytest.approx(step_mismatch_bound(iss, t), rel=1e-12, abs=1e-15)


def test_geometric_majorization():
    rng = np.random.default_rng(0)
    for _ in range(100):
        iss = _random_iss(rng)
        T = len(iss.d_seq) + 1
        total = sum(step_mismatch_bound(iss, t) for t in range(T))
        assert total <= iss.transfer_penalty + 1e-12


def test_safety_lower_bound_example():
    cert = safety_lower_bound(_iss(), 0.025)
    assert cert.bound == pytest.approx(0.775)
    assert not cert.vacuous


def test_perfect_tracking_costs_nothing():
    cert = safety_lower_bound(_iss(e0=0.0, d_seq=[]), 0.025)
    assert cert.bound == pytest.approx(0.975)


def test_vacuous_certificate():
    assert safety_lower_bound(_iss(L=10.0), 0.025).vacuous
    assert safety_lower_bound(_iss(), 1.0).vacuous


def test_alpha_outside_unit_interval():
    iss = IssEstimate.model_construct(alpha=1.0, beta=1.0, e0=0.0, d_seq=[1.0], P_weight=1.0, L=0.1)
    with pytest.raises(DomainError):
        safety_lower_bound(iss, 0.025)


@pytest.mark.parametrize("field, smaller", [("L", 0.05), ("e0", 0.0), ("beta", 0.5), ("alpha", 0.3)])
def test_bound_monotonicity(field, smaller):
    base = _iss(e0=0.2)
    improved = base.model_copy(update={field: smaller})
    assert safety_lower_bound(improved, 0.025).bound >= safety_lower_bound(base, 0.025).bound


def test_bound_monotone_in_reference_variation():
    assert (safety_lower_bound(_iss(d_seq=[0.5]), 0.025).bound
            >= safety_lower_bound(_iss(d_seq=[1.0]), 0.025).bound)


def test_bound_never_exceeds_one_minus_delta():
    rng = np.random.default_rng(5)
    for _ in range(50):
        assert safety_lower_bound(_random_iss(rng), 0.1).bound <= 0.9


def test_required_reduced_delta():
    iss = _iss()
    assert required_reduced_delta(iss, 0.5) == pytest.approx(0.3)
    with pytest.raises(DomainError):
        required_reduced_delta(iss, 0.1)


# 証明

def test_certify_end_to_end(small_policy):
    plant = PlantConfig(noise_sigma=0.05)
    sampler = InitialStateSampler(episodes=10, seed=3)
    cert = certify(small_policy, gains_from(12.0, 1.0, plant.J_in), plant, TaskConfig(), sampler,
                   delta=0.025, horizon=20, cfg=CertifyConfig(episodes=10))
    assert cert.n_episodes == 10
    assert cert.horizon == 20
    assert cert.bound == pytest.approx(1 - 0.025 - cert.iss.transfer_penalty)
    assert 0.0 <= cert.empirical_safe_probability <= 1.0
    assert cert.empirical_below_bound == (cert.empirical_safe_probability < cert.bound)
    assert len(cert.iss.d_seq) == 19
    assert 0.0 <= cert.reduced_failure_probability <= 1.0
    assert cert.reduced_delta_exceeded == (cert.reduced_failure_probability > 0.025)


def test_certify_refuses_deterministic_plant(small_policy):
    with pytest.raises(DegenerateKernelError):
        certify(small_policy, gains_from(12.0, 1.0, 0.02), PlantConfig(), TaskConfig(),
                InitialStateSampler(episodes=2), delta=0.025, horizon=5)


def test_reduced_failure_outside_safe_set(small_policy):
    starts = np.array([[9.5, 0.0, 3.0, 0.0], [9.8, 0.0, 5.0, 0.0]])
    value = reduced_failure_probability(small_policy, PlantConfig(noise_sigma=0.05), TaskConfig(), starts,
                                        horizon=5, deterministic=True, seed=0)
    assert value == 1.0


def test_certify_hands_out_trajectories(small_policy):
    plant = PlantConfig(noise_sigma=0.05)
    seen = {}
    certify(small_policy, gains_from(12.0, 1.0, plant.J_in), plant, TaskConfig(),
            InitialStateSampler(episodes=4, seed=1), delta=0.025, horizon=10,
            cfg=CertifyConfig(episodes=4, export_episodes=2), on_trajectory=seen.__setitem__)
    assert sorted(seen) == ["certify_ep000", "certify_ep001"]
    assert all(traj.has_inner and traj.horizon == 10 for traj in seen.values())


def test_weak_gains_give_smaller_bound(small_policy):
    plant, task = PlantConfig(noise_sigma=0.05), TaskConfig()
    sampler = InitialStateSampler(episodes=10, seed=3)
    cfg = CertifyConfig(episodes=10)
    strong = certify(small_policy, gains_from(12.0, 1.0, plant.J_in), plant, task, sampler,
                     delta=0.025, horizon=20, cfg=cfg)
    weak = certify(small_policy, gains_from(2.0, 0.2, plant.J_in), plant, task, sampler,
                   delta=0.025, horizon=20, cfg=cfg)
    assert weak.iss.transfer_penalty > strong.iss.transfer_penalty
    assert weak.bound < strong.bound
