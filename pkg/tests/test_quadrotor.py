import math

import numpy as np
import pytest

from src.config import PlantConfig
from src.models.errors import InputError
from src.models.states import FullState, InnerState, OuterState, PolicyAction
from src.utils.quadrotor import ReducedQuadrotor, check_outer_matching, full_step, reduced_step

TOL = 1e-12


def reference_step(state, thrust, moment, p: PlantConfig):
    """半陰的オイラー法をそのまま書き下したもの"""
    p_x, v_x, p_z, v_z, theta, theta_dot = state
    v_x_next = v_x + thrust / p.m * math.sin(theta) * p.dt
    v_z_next = v_z + (thrust / p.m * math.cos(theta) - p.g) * p.dt
    theta_dot_next = theta_dot + moment / p.J_in * p.dt
    return [p_x + v_x_next * p.dt, v_x_next, p_z + v_z_next * p.dt, v_z_next,
            theta + theta_dot_next * p.dt, theta_dot_next]


def test_hover_is_equilibrium(plant):
    s = FullState()
    assert full_step(s, plant.hover_thrust, 0.0, plant) == s


def test_moment_step(plant):
    nxt = full_step(FullState(), 9.81, 0.02, plant)
    assert nxt.inner.theta_dot == pytest.approx(0.05, abs=TOL)
    assert nxt.inner.theta == pytest.approx(0.0025, abs=TOL)
    assert nxt.outer == OuterState()


def test_free_fall(plant):
    nxt = full_step(FullState(), 0.0, 0.0, plant)
    assert nxt.outer.v_z == pytest.approx(-0.4905, abs=TOL)
    assert nxt.outer.p_z == pytest.approx(-0.024525, abs=TOL)


def test_free_fall_loses_g_dt_each_step(plant):
    s = FullState()
    for k in range(1, 11):
        s = full_step(s, 0.0, 0.0, plant)
        assert s.outer.v_z == pytest.approx(-k * plant.g * plant.dt, abs=TOL)


def test_matches_reference_implementation(plant):
    rng = np.random.default_rng(3)
    for _ in range(50):
        state = rng.uniform(-2.0, 2.0, size=6)
        thrust, moment = rng.uniform(0.0, 15.0), rng.uniform(-1.0, 1.0)
        nxt = full_step(FullState.from_array(state), thrust, moment, plant).to_array()
        np.testing.assert_allclose(nxt, reference_step(state, thrust, moment, plant), rtol=0, atol=TOL)


def test_negative_thrust_is_rejected(plant):
    with pytest.raises(InputError):
        full_step(FullState(), -1.0, 0.0, plant)


def test_reduced_hover(plant):
    assert reduced_step(OuterState(), PolicyAction(0.0, 0.0), plant) == OuterState()


def test_reduced_sideways_reference(plant):
    nxt = reduced_step(OuterState(), PolicyAction(0.0, math.pi / 2), plant)
    assert nxt.v_x == pytest.approx(0.4905, abs=TOL)
    assert nxt.p_x == pytest.approx(0.024525, abs=TOL)
    assert nxt.v_z == pytest.approx(-0.4905, abs=TOL)
    assert nxt.p_z == pytest.approx(-0.024525, abs=TOL)


def test_reduced_mirror_symmetry(plant):
    s = OuterState(p_x=3.0, v_x=0.0, p_z=4.0, v_z=0.7)
    plus = reduced_step(s, PolicyAction(0.0, 0.3), plant)
    minus = reduced_step(s, PolicyAction(0.0, -0.3), plant)
    assert plus.p_z == minus.p_z
    assert plus.p_x - s.p_x == pytest.approx(-(minus.p_x - s.p_x), abs=TOL)


def test_outer_matching_single_sample(plant):
    full = full_step(FullState(OuterState(), InnerState(0.3, 0.0)), plant.hover_thrust + 1.0, 0.0, plant)
    reduced = reduced_step(OuterState(), PolicyAction(1.0, 0.3), plant)
    assert full.outer == reduced


def test_outer_matching_deterministic(plant):
    report = check_outer_matching(plant, samples=1000, rng_seed=0)
    assert report.passed
    assert report.max_deviation < 1e-12


def test_outer_matching_with_shared_noise():
    report = check_outer_matching(PlantConfig(noise_sigma=0.1), samples=200, rng_seed=1)
    assert report.passed


def test_noise_requires_generator():
    with pytest.raises(InputError):
        reduced_step(OuterState(), PolicyAction(), PlantConfig(noise_sigma=0.1))


def test_reduced_system_matches_reduced_step(plant):
    s = OuterState(p_x=2.0, v_x=0.3, p_z=4.0, v_z=-0.1)
    a = PolicyAction(delta_thrust=1.5, theta_ref=0.2)
    assert ReducedQuadrotor(plant).step(s, a) == reduced_step(s, a, plant)
