import json

import numpy as np
import pytest

from bankmpc.bank import planted_bank, sample_bank
from bankmpc.harness import (TRACE_COLUMNS, WARMUP_SENTINEL, ConfigError, RunTrace, ScenarioConfig, build_planning,
                             compute_metrics, lap_times_from_s, preset_config, run_scenario, sweep_bank_size,
                             sweep_window)


def make_trace(n, dt=0.02, **cols):
    data = np.zeros((n, len(TRACE_COLUMNS)))
    data[:, 0] = dt * np.arange(1, n + 1)
    for name, values in cols.items():
        data[:, TRACE_COLUMNS.index(name)] = values
    return RunTrace(data, dt)


@pytest.fixture(scope="module")
def oval_planning():
    return build_planning(ScenarioConfig())


def circle_cfg(controller, **kw):
    return ScenarioConfig().replace(**{"track.kind": "circle", "track.n_points": 360, "run.controller": controller,
                                       "bank.N": 200, **kw})


def planted(cfg, j=37):
    b = sample_bank(np.asarray(cfg.nominal_theta()), cfg.bank.range_fraction, cfg.bank.N, cfg.bank.seed)
    return planted_bank(b, j, cfg.plant.theta_0)


# --- configuration ------------------------------------------------------------------


def test_defaults_match_packaged_json():
    from bankmpc.cli import default_config_path
    assert json.loads(default_config_path().read_text()) == json.loads(ScenarioConfig().to_json())
    cfg = ScenarioConfig()
    assert cfg.W_steps == 10 and cfg.mpc.H_steps == 20 and cfg.run.dt == 0.02 and cfg.bank.N == 5000


def test_partial_json_merges_over_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"bank": {"N": 123}, "run": {"laps": 2}}))
    cfg = ScenarioConfig.from_json(p)
    assert cfg.bank.N == 123 and cfg.run.laps == 2 and cfg.bank.W_s == 0.2


@pytest.mark.parametrize("patch", [
    {"bank": {"nope": 1}},
    {"nope": {}},
    {"bank": {"W_s": 0.01}},
    {"bank": {"W_s": 0.03}},
    {"run": {"laps": 0}},
    {"run": {"dt": 0.0}},
    {"run": {"controller": "pid"}},
    {"mpc": {"samples": 0}},
    {"plant": {"kind": "wobble"}},
    {"track": {"kind": "figure8"}},
])
def test_invalid_configs_rejected(patch):
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(patch)


def test_bad_json_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ScenarioConfig.from_json(p)


def test_presets_and_seed():
    e1 = preset_config("exp1")
    assert e1.plant.kind == "linear_decay" and e1.plant.decay_rate == 0.02
    e2 = preset_config("exp2", "oracle")
    assert e2.plant.kind == "step_drop" and e2.plant.trigger == "lap" and e2.run.controller == "oracle"
    e3 = preset_config("exp3")
    assert e3.plant.trigger == "position" and e3.plant.trigger_value == 0.5 and e3.plant.trigger_lap == 0
    s = e1.with_seed(9)
    assert s.bank.seed == 9 and s.mpc.seed == 9
    with pytest.raises(ConfigError):
        ScenarioConfig().with_preset("exp9")


# --- metrics ------------------------------------------------------------------------


def test_metrics_on_raceline_trace(oval_planning):
    track, rl, _ = oval_planning
    s = np.linspace(0.1, 2.0, 50)
    m = compute_metrics(make_trace(50, s=s, e_y=rl.interp(s, rl.lateral_offset)), track, rl)
    assert m.mean_deviation == 0.0 and m.violation_time == 0.0
    assert m.lap_times == [] and not m.completed


def test_metrics_violation_counting(oval_planning):
    track, rl, _ = oval_planning
    e_y = np.zeros(60)
    e_y[5:10] = track.half_width_left[0] + 0.01
    e_y[30:35] = -(track.half_width_right[0] + 0.01)
    m = compute_metrics(make_trace(60, s=np.full(60, 0.5), e_y=e_y, deviation=np.full(60, -0.03)), track, rl)
    assert m.violation_time == pytest.approx(0.2, abs=1e-15)
    assert m.mean_deviation == pytest.approx(0.03)


def test_metrics_constructed_two_laps(oval_planning):
    track, rl, _ = oval_planning
    L = track.length
    k = np.arange(1, 251)
    s = ((k % 100) + 0.5) / 100 * L
    m = compute_metrics(make_trace(250, s=s, cost=np.ones(250)), track, rl, laps_target=2)
    assert m.lap_times == [pytest.approx(2.0, abs=1e-12)] * 2
    assert m.completed and m.total_mpc_cost == 250.0 and m.sim_time == pytest.approx(5.0)
    assert lap_times_from_s(np.array([1.0, 2.0]), np.array([0.9 * L, 0.1 * L]), L) == [2.0]


def test_empty_trace_rejected(oval_planning):
    track, rl, _ = oval_planning
    with pytest.raises(ValueError):
        compute_metrics(make_trace(0), track, rl)


# --- closed loop --------------------------------------------------------------------


@pytest.fixture(scope="module")
def circle_oracle():
    return run_scenario(circle_cfg("oracle"))


def test_circle_oracle_laps_agree(circle_oracle):
    m = circle_oracle.metrics
    assert m.completed and len(m.lap_times) == 3
    laps = np.array(m.lap_times)
    assert laps.max() / laps.min() - 1 <= 0.02
    assert m.violation_time == 0.0


def test_planted_lla_matches_oracle(circle_oracle):
    cfg = circle_cfg("lla")
    res = run_scenario(cfg, bank=planted(cfg))
    assert res.metrics.completed
    gap = abs(res.metrics.total_lap_time / circle_oracle.metrics.total_lap_time - 1)
    assert gap <= 0.05
    j = res.trace.j_star
    assert np.all(j[: cfg.W_steps - 1] == WARMUP_SENTINEL) and np.all(j[cfg.W_steps:] == 37)


def test_planted_closed_loop_deviation():
    cfg = circle_cfg("lla", **{"run.max_time": 4.0})
    res = run_scenario(cfg, bank=planted(cfg))
    tr = res.trace
    after = tr.t > 2.0
    assert np.max(np.abs(tr.deviation[after])) <= 0.05


def test_short_run_determinism_and_round_trip(tmp_path):
    cfg = preset_config("exp2", **{"bank.N": 300, "run.max_time": 1.0, "output.dir": str(tmp_path / "a")})
    a = run_scenario(cfg)
    b = run_scenario(cfg.replace(**{"output.dir": str(tmp_path / "b")}))
    c = run_scenario(cfg.replace(**{"run.workers": 3, "output.dir": str(tmp_path / "c")}))
    for other in (b, c):
        np.testing.assert_array_equal(a.trace.deterministic_part(), other.trace.deterministic_part())
    texts = {(tmp_path / d / "metrics.json").read_text() for d in "abc"}
    assert len(texts) == 1
    # warm-up sentinel, then a selected model each step
    j = a.trace.j_star
    assert np.all(j[: cfg.W_steps - 1] == WARMUP_SENTINEL) and np.all(j[cfg.W_steps:] >= 0)
    # metrics recomputed from the dumped CSV reproduce the in-run values
    back = RunTrace.from_csv(tmp_path / "a" / "trace.csv", cfg.run.dt)
    np.testing.assert_array_equal(back.data, a.trace.data)
    track, rl, _ = build_planning(cfg)
    again = compute_metrics(back, track, rl, cfg.run.laps)
    assert again.to_json() == a.metrics.to_json()
    timing = json.loads((tmp_path / "a" / "timing.json").read_text())
    assert timing["avg_compute_time"] > 0
    assert len(a.trace) == 50 and not a.metrics.completed
    np.testing.assert_allclose(np.diff(a.trace.t), cfg.run.dt, rtol=1e-9)


def test_divergence_reported_as_incomplete():
    # a controller convinced the grip is huge overdrives the first corner
    cfg = ScenarioConfig().replace(**{"run.controller": "fixed_nominal", "bank.nominal": [2.579, 3.3852, 1.2, 1.2691,
                                      1.5, 1.5, 0.0518, 0.00035], "run.max_time": 8.0,
                                      "run.divergence_widths": 1.0})
    res = run_scenario(cfg)
    assert not res.metrics.completed
    assert res.diverged and len(res.trace) < 400


def test_sweep_preconditions():
    cfg = ScenarioConfig()
    with pytest.raises(ConfigError):
        sweep_bank_size(cfg, [200], [0, 1, 2])
    with pytest.raises(ConfigError):
        sweep_bank_size(cfg, [200, 400], [0, 1])
    with pytest.raises(ConfigError):
        sweep_window(cfg, [0.2], [0, 1, 2])
    with pytest.raises(ConfigError):
        sweep_window(cfg, [0.01, 0.2], [0, 1, 2])


def test_sweep_repeat_seed_identical():
    cfg = ScenarioConfig().replace(**{"run.max_time": 0.6})
    rows = sweep_bank_size(cfg, [50, 100], [4, 4, 4])
    for _, med, costs in rows:
        assert costs[0] == costs[1] == costs[2] == med
    rows = sweep_window(cfg.with_preset("exp2"), [0.02, 0.1], [1, 1, 1])
    for _, med, costs in rows:
        assert len(set(costs)) == 1
