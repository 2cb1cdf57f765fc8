import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bankmpc.dynamics import ParamSchedule, TireSurfaceParams, VehicleFixedParams
from bankmpc.mpc import COST_SENTINEL, MPCConfig, Solution, oracle_step, rollout_cost, solve
from bankmpc.planner import build_library, min_curvature_raceline, reference
from bankmpc.track import generate_synthetic_track
from oracles import reference_cost

FIXED = VehicleFixedParams()
NOM = np.array([2.579, 3.3852, 1.2, 1.2691, 0.192, 0.1737, 0.0518, 0.00035])
NO_DRAG = NOM.copy()
NO_DRAG[6:] = 0.0
CFG = MPCConfig()


def straight_ref(v, H=20, dt=0.02, hw=0.2):
    k = np.arange(H + 1)
    return np.column_stack([v * k * dt, np.zeros(H + 1), np.zeros(H + 1), np.full(H + 1, v), np.zeros(H + 1),
                            np.full(H + 1, hw), np.full(H + 1, hw)])


@pytest.fixture(scope="module")
def oval():
    rl = min_curvature_raceline(generate_synthetic_track("oval", 1.0, 400))
    return rl, build_library(rl)


def curved_case(oval, s=4.3, lateral=0.03, v=1.2):
    rl, lib = oval
    x, y, phi = rl.pose_at(s)
    x0 = np.array([x - lateral * math.sin(phi), y + lateral * math.cos(phi), phi + 0.05, v, 0.0, 1.0, 0.02])
    return x0, reference(rl, lib, 0.45, x0, CFG.H_steps, 0.02)


def test_exact_tracking_has_zero_cost():
    v = 1.3
    x0 = [0, 0, 0, v, 0, 0, 0]
    cost, states = rollout_cost(NO_DRAG, x0, np.zeros((20, 2)), straight_ref(v), CFG, FIXED)
    assert cost < 1e-20
    np.testing.assert_array_equal(states[0], x0)


def test_position_term_is_linear_in_weight(oval):
    x0, ref = curved_case(oval)
    U = np.tile([0.3, 0.01], (20, 1))
    base, _ = rollout_cost(NOM, x0, U, ref, replace(CFG, q_pos=0.0), FIXED)
    one, _ = rollout_cost(NOM, x0, U, ref, CFG, FIXED)
    two, _ = rollout_cost(NOM, x0, U, ref, replace(CFG, q_pos=2 * CFG.q_pos), FIXED)
    assert one > base
    assert two - base == pytest.approx(2 * (one - base), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 0.08))
def test_cost_matches_scalar_loop(seed, hw_shrink):
    rng = np.random.default_rng(seed)
    x0 = np.array([rng.normal(0, 0.02), rng.normal(0, 0.02), rng.normal(0, 0.1), rng.uniform(0.5, 2.0),
                   rng.normal(0, 0.05), rng.normal(0, 1.0), rng.uniform(-0.2, 0.2)])
    U = np.column_stack([rng.uniform(-1, 1, 20), rng.uniform(-0.05, 0.05, 20)])
    ref = straight_ref(1.2, hw=0.1 - hw_shrink)
    ref[:, 4] = rng.normal(0, 0.02, 21)
    u_prev = rng.uniform(-0.05, 0.05, 2)
    got, _ = rollout_cost(NOM, x0, U, ref, CFG, FIXED, u_prev=u_prev)
    want = reference_cost(NOM, x0, U, ref, CFG, FIXED, u_prev=u_prev)
    assert got == pytest.approx(want, rel=1e-10)


def test_boundary_penalty_activates():
    x0 = [0, 0.15, 0, 1.0, 0, 0, 0]
    inside, _ = rollout_cost(NO_DRAG, x0, np.zeros((20, 2)), straight_ref(1.0, hw=0.2), CFG, FIXED)
    outside, _ = rollout_cost(NO_DRAG, x0, np.zeros((20, 2)), straight_ref(1.0, hw=0.1), CFG, FIXED)
    assert outside > inside


def test_nonfinite_rollout_gets_sentinel():
    bad = [1.0, 1.0, 1.0, 1.0, 1e308, 1e308, 0.0, 0.0]
    x0 = [0, 0, 0, 1.0, 0, 0, 0.1]
    cost, _ = rollout_cost(bad, x0, np.zeros((20, 2)), straight_ref(1.0), CFG, FIXED)
    assert cost == COST_SENTINEL
    sol = solve(bad, x0, straight_ref(1.0), CFG, fixed=FIXED)
    assert sol.cost <= COST_SENTINEL


def test_rollout_shape_errors():
    with pytest.raises(ValueError):
        rollout_cost(NOM, np.zeros(7), np.zeros((19, 2)), straight_ref(1.0), CFG, FIXED)
    with pytest.raises(ValueError):
        rollout_cost(NOM, np.zeros(7), np.zeros((20, 2)), straight_ref(1.0, H=10), CFG, FIXED)


def test_stationary_reference_returns_zero_inputs():
    x0 = np.array([0.2, -0.1, 0.3, 0.0, 0.0, 0.0, 0.0])
    ref = np.tile([0.2, -0.1, 0.3, 0.0, 0.0, 0.2, 0.2], (21, 1))
    sol = solve(NO_DRAG, x0, ref, CFG, fixed=FIXED)
    zero_cost, _ = rollout_cost(NO_DRAG, x0, np.zeros((20, 2)), ref, CFG, FIXED)
    assert sol.cost <= zero_cost == 0.0
    np.testing.assert_array_equal(sol.inputs, 0.0)


def test_solution_contract(oval):
    x0, ref = curved_case(oval)
    sol = solve(NOM, x0, ref, CFG, fixed=FIXED, u_prev=(0.2, 0.0))
    assert sol.inputs.shape == (20, 2) and sol.predicted_states.shape == (21, 7)
    np.testing.assert_array_equal(sol.predicted_states[0], x0)
    assert np.all(sol.inputs >= CFG.lower) and np.all(sol.inputs <= CFG.upper)
    assert math.isfinite(sol.cost)
    again, states = rollout_cost(NOM, x0, sol.inputs, ref, CFG, FIXED, u_prev=(0.2, 0.0))
    assert again == sol.cost
    np.testing.assert_array_equal(states, sol.predicted_states)


def test_iteration_costs_never_increase(oval):
    x0, ref = curved_case(oval)
    cfg = replace(CFG, iterations=8)
    sol = solve(NOM, x0, ref, cfg, fixed=FIXED)
    h = np.array(sol.iteration_costs)
    assert len(h) == 8 and np.all(np.diff(h) <= 0)
    assert h[-1] == sol.cost


def test_determinism_and_worker_invariance(oval):
    x0, ref = curved_case(oval)
    a = solve(NOM, x0, ref, CFG, fixed=FIXED, key=7)
    b = solve(NOM, x0, ref, CFG, fixed=FIXED, key=7)
    c = solve(NOM, x0, ref, CFG, fixed=FIXED, key=7, workers=4)
    for other in (b, c):
        np.testing.assert_array_equal(a.inputs, other.inputs)
        np.testing.assert_array_equal(a.predicted_states, other.predicted_states)
        assert a.cost == other.cost and a.iteration_costs == other.iteration_costs
    d = solve(NOM, x0, ref, CFG, fixed=FIXED, key=8)
    assert not np.array_equal(a.inputs, d.inputs)


def test_dominates_warm_start_and_zero(oval):
    x0, ref = curved_case(oval)
    rng = np.random.default_rng(1)
    for trial in range(20):
        warm_u = np.column_stack([rng.uniform(-1.5, 1.5, 20), rng.uniform(-0.08, 0.08, 20)])
        warm = Solution(warm_u, np.zeros((21, 7)), 0.0)
        sol = solve(NOM, x0, ref, replace(CFG, samples=4, elites=2, iterations=1), warm, fixed=FIXED, key=trial)
        shifted = np.clip(warm.shifted(), CFG.lower, CFG.upper)
        c_warm, _ = rollout_cost(NOM, x0, shifted, ref, CFG, FIXED)
        c_zero, _ = rollout_cost(NOM, x0, np.zeros((20, 2)), ref, CFG, FIXED)
        assert sol.cost <= min(c_warm, c_zero)


def test_shifted_repeats_last_input():
    u = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(Solution(u, np.zeros((4, 7)), 0.0).shifted(), [[2, 3], [4, 5], [4, 5]])


@pytest.mark.parametrize("kw", [dict(samples=0), dict(elites=65), dict(elites=0), dict(H_steps=0),
                                dict(q_pos=-1.0), dict(r_rate=(1.0, -1.0)), dict(iterations=0),
                                dict(noise_correlation=1.0), dict(d_min=1.0, d_max=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        MPCConfig(**kw)


def test_oracle_with_constant_schedule_equals_solve(oval):
    x0, ref = curved_case(oval)
    sched = ParamSchedule(TireSurfaceParams(*NOM))
    a = oracle_step(sched, 3.0, 1, x0, ref, CFG, fixed=FIXED, key=2)
    b = solve(NOM, x0, ref, CFG, fixed=FIXED, key=2)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert a.cost == b.cost


def test_oracle_uses_dropped_parameters(oval):
    x0, ref = curved_case(oval)
    sched = ParamSchedule(TireSurfaceParams(*NOM), "step_drop", drop_fraction=0.4, trigger="lap", trigger_value=1)
    dropped = NOM.copy()
    dropped[4:6] *= 0.6
    a = oracle_step(sched, 3.0, 1, x0, ref, CFG, fixed=FIXED)
    b = solve(dropped, x0, ref, CFG, fixed=FIXED)
    assert a.cost == b.cost
    a2 = oracle_step(sched, 3.0, 1, x0, ref, CFG, fixed=FIXED)
    np.testing.assert_array_equal(a.inputs, a2.inputs)
