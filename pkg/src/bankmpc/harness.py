"""Scenario configuration, closed-loop simulation, metrics and parameter sweeps."""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bank import ErrorWindow, ModelBank, predict_all, sample_bank, select_best
from .dynamics import (IntegrationError, ParamSchedule, TireSurfaceParams, VehicleFixedParams, friction_of, rk4_step,
                       schedule_eval)
from .estimator import FrictionEstimate
from .mpc import MPCConfig, Solution, solve
from .planner import ProfileLimits, RaceLine, VelocityProfileLibrary, build_library, min_curvature_raceline, reference
from .track import Track, generate_synthetic_track, lap_counter, load_track, project

# tire/surface values of a 1:43 scale car on its reference surface
DEFAULT_THETA = (2.579, 3.3852, 1.2, 1.2691, 0.192, 0.1737, 0.0518, 0.00035)

CONTROLLERS = ("lla", "oracle", "fixed_nominal")
PRESETS = ("exp1", "exp2", "exp3")

TRACE_COLUMNS = ("t", "x", "y", "phi", "vx", "vy", "omega", "delta", "d", "ddelta", "mu_true", "mu_hat", "j_star",
                 "s", "e_y", "deviation", "lap", "cost", "compute_time")
# j_star value logged while the look-back window is still filling
WARMUP_SENTINEL = -1


class ConfigError(ValueError):
    pass


@dataclass
class TrackConfig:
    kind: str = "oval"
    scale: float = 1.0
    n_points: int = 400
    file: Optional[str] = None


@dataclass
class PlantConfig:
    theta_0: List[float] = field(default_factory=lambda: list(DEFAULT_THETA))
    kind: str = "constant"
    decay_rate: float = 0.02
    drop_fraction: float = 0.4
    trigger: str = "lap"
    trigger_value: float = 1.0
    trigger_lap: int = 0
    scale_shape: bool = False


@dataclass
class BankConfig:
    N: int = 5000
    range_fraction: float = 1.5
    seed: int = 0
    weights: List[float] = field(default_factory=lambda: [1.0] * 7)
    W_s: float = 0.2
    # None means the bank is centred on the plant's initial parameters
    nominal: Optional[List[float]] = None


@dataclass
class EstimatorConfig:
    gamma: float = 0.05
    mu_init: float = 1.0


@dataclass
class PlannerConfig:
    mu_min: float = 0.3
    mu_max: float = 1.2
    n_profiles: int = 9
    a_acc_scale: float = 0.5
    a_brake_scale: float = 0.6
    v_max: float = 4.0
    kappa_min: float = 1e-3
    margin: float = 0.02
    raceline_iters: int = 100

    def limits(self, g: float) -> ProfileLimits:
        return ProfileLimits(self.a_acc_scale, self.a_brake_scale, self.v_max, self.kappa_min, g)


@dataclass
class RunConfig:
    dt: float = 0.02
    substeps: int = 4
    laps: int = 3
    max_time: float = 60.0
    controller: str = "lla"
    # None: flying start at the profile speed for the plant's initial friction
    v0: Optional[float] = None
    start_index: int = 1
    noise_std: List[float] = field(default_factory=lambda: [0.0] * 7)
    workers: int = 1
    divergence_widths: float = 5.0


@dataclass
class OutputConfig:
    dir: Optional[str] = None
    dump_bank: bool = False


@dataclass
class ScenarioConfig:
    track: TrackConfig = field(default_factory=TrackConfig)
    vehicle: VehicleFixedParams = field(default_factory=VehicleFixedParams)
    plant: PlantConfig = field(default_factory=PlantConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    mpc: MPCConfig = field(default_factory=MPCConfig)
    run: RunConfig = field(default_factory=RunConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        self.validate()

    @property
    def W_steps(self) -> int:
        return _whole_steps(self.bank.W_s, self.run.dt, "W")

    def validate(self) -> "ScenarioConfig":
        r = self.run
        if not r.dt > 0:
            raise ConfigError("dt must be positive")
        self.W_steps
        if r.laps < 1:
            raise ConfigError("laps target must be >= 1")
        if r.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        if not r.max_time > 0:
            raise ConfigError("max_time must be positive")
        if r.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}")
        if len(r.noise_std) != 7 or any(v < 0 for v in r.noise_std):
            raise ConfigError("noise_std must be 7 non-negative values")
        if r.v0 is not None and not r.v0 > 0:
            raise ConfigError("v0 must be positive")
        if r.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.bank.N < 1:
            raise ConfigError("bank N must be >= 1")
        if len(self.bank.weights) != 7 or any(v < 0 for v in self.bank.weights):
            raise ConfigError("bank weights must be 7 non-negative values")
        if not 0 < self.estimator.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.track.file is None and self.track.kind not in ("circle", "oval", "chicane"):
            raise ConfigError(f"unknown track kind {self.track.kind!r}")
        try:
            self.schedule()
            TireSurfaceParams(*self.nominal_theta()).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def schedule(self) -> ParamSchedule:
        p = self.plant
        return ParamSchedule(TireSurfaceParams(*p.theta_0), p.kind, p.decay_rate, p.drop_fraction, p.trigger,
                             p.trigger_value, p.trigger_lap, p.scale_shape)

    def nominal_theta(self) -> Tuple[float, ...]:
        return tuple(self.bank.nominal if self.bank.nominal is not None else self.plant.theta_0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Optional[dict] = None) -> "ScenarioConfig":
        merged = _merge(cls().to_dict(), data or {}, "")
        try:
            return cls(**{name: _SECTIONS[name](**value) for name, value in merged.items()})
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def replace(self, **sections) -> "ScenarioConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"bank.N": 200})``."""
        data = self.to_dict()
        patch: dict = {}
        for key, value in sections.items():
            head, _, tail = key.partition(".")
            if not tail:
                raise ConfigError(f"override {key!r} must be section.field")
            patch.setdefault(head, {})[tail] = value
        return ScenarioConfig.from_dict(_merge(data, patch, ""))

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return self.replace(**{"bank.seed": int(seed), "mpc.seed": int(seed)})

    def with_preset(self, preset: str) -> "ScenarioConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        return self.replace(**{f"plant.{k}": v for k, v in PRESET_PLANTS[preset].items()})


_SECTIONS = {
    "track": TrackConfig,
    "vehicle": VehicleFixedParams,
    "plant": PlantConfig,
    "bank": BankConfig,
    "estimator": EstimatorConfig,
    "planner": PlannerConfig,
    "mpc": MPCConfig,
    "run": RunConfig,
    "output": OutputConfig,
}

PRESET_PLANTS = {
    "exp1": {"kind": "linear_decay", "decay_rate": 0.02},
    "exp2": {"kind": "step_drop", "drop_fraction": 0.4, "trigger": "lap", "trigger_value": 1.0},
    "exp3": {"kind": "step_drop", "drop_fraction": 0.4, "trigger": "position", "trigger_value": 0.5,
             "trigger_lap": 0},
}


def _merge(base: dict, patch: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in patch.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be an object")
            out[key] = _merge(out[key], value, path)
        else:
            out[key] = value
    return out


def _whole_steps(seconds: float, dt: float, name: str) -> int:
    n = seconds / dt
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-9 * max(1.0, n):
        raise ConfigError(f"{name} = {seconds} s is not a whole number (>= 1) of {dt} s steps")
    return k


def preset_config(preset: str, controller: str = "lla", **overrides) -> ScenarioConfig:
    cfg = ScenarioConfig().with_preset(preset)
    overrides = {"run.controller": controller, **overrides}
    return cfg.replace(**overrides)


# --- track / planner setup -------------------------------------------------------

_PLANNING_CACHE: Dict[tuple, Tuple[Track, RaceLine]] = {}


def build_track(cfg: TrackConfig) -> Track:
    if cfg.file is not None:
        return load_track(cfg.file)
    return generate_synthetic_track(cfg.kind, cfg.scale, cfg.n_points)


def build_planning(cfg: ScenarioConfig) -> Tuple[Track, RaceLine, VelocityProfileLibrary]:
    """Track, raceline and profile library; the raceline is cached per process."""
    t, p = cfg.track, cfg.planner
    key = (t.kind, t.scale, t.n_points, t.file, Path(t.file).stat().st_mtime_ns if t.file else None,
           p.margin, p.raceline_iters)
    if key not in _PLANNING_CACHE:
        track = build_track(t)
        _PLANNING_CACHE[key] = (track, min_curvature_raceline(track, p.margin, p.raceline_iters))
    track, rl = _PLANNING_CACHE[key]
    lib = build_library(rl, p.mu_min, p.mu_max, p.n_profiles, p.limits(cfg.vehicle.g))
    return track, rl, lib


def initial_state(raceline: RaceLine, index: int, v0: float, fixed: VehicleFixedParams = VehicleFixedParams()):
    """On the raceline, aligned with it, with the yaw rate and kinematic steering of its curvature."""
    i = index % len(raceline.s_rl)
    x, y, phi = raceline.pose_at(float(raceline.s_rl[i]))
    kappa = float(raceline.curvature[i])
    delta = float(np.clip(math.atan((fixed.l_f + fixed.l_r) * kappa), -fixed.delta_max, fixed.delta_max))
    return np.array([float(x), float(y), float(phi), v0, 0.0, v0 * kappa, delta])


# --- trace and metrics ------------------------------------------------------------


@dataclass(eq=False)
class RunTrace:
    data: np.ndarray
    dt: float

    def __len__(self):
        return self.data.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, TRACE_COLUMNS.index(name)]

    def __getattr__(self, name):
        if name in TRACE_COLUMNS:
            return self.column(name)
        raise AttributeError(name)

    def deterministic_part(self) -> np.ndarray:
        """All columns except the wall-clock compute time."""
        return self.data[:, :-1]

    def to_csv(self, path) -> None:
        np.savetxt(path, self.data, delimiter=",", header=",".join(TRACE_COLUMNS), comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path, dt: Optional[float] = None) -> "RunTrace":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected trace header")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if dt is None:
            dt = float(data[1, 0] - data[0, 0]) if len(data) > 1 else float(data[0, 0])
        return cls(data, dt)


@dataclass
class Metrics:
    lap_times: List[float]
    violation_time: float
    mean_deviation: float
    avg_compute_time: float
    completed: bool
    total_mpc_cost: float
    steps: int = 0
    sim_time: float = 0.0

    @property
    def total_lap_time(self) -> float:
        return float(sum(self.lap_times))

    def deterministic_dict(self) -> dict:
        """Metrics that depend only on (config, seed); wall-clock timing is excluded."""
        d = dataclasses.asdict(self)
        d.pop("avg_compute_time")
        return d

    def to_json(self) -> str:
        return json.dumps(self.deterministic_dict(), indent=2, sort_keys=True)


def lap_times_from_s(t: np.ndarray, s: np.ndarray, length: float, s_start: Optional[float] = None) -> List[float]:
    """Lap durations from start-line crossings in an arc-length trace."""
    prev = s[0] if s_start is None else s_start
    last = 0.0
    out = []
    for ti, si in zip(t, s):
        if lap_counter(prev, si, length):
            out.append(float(ti - last))
            last = float(ti)
        prev = si
    return out


def compute_metrics(trace: RunTrace, track: Track, raceline: Optional[RaceLine] = None,
                    laps_target: Optional[int] = None) -> Metrics:
    """Metrics of a run from its trace alone.

    ``raceline`` is accepted for interface symmetry; the trace already holds
    the deviation from it. ``completed`` means ``laps_target`` laps finished
    (any lap if no target is given).
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    s = trace.column("s")
    e_y = trace.column("e_y")
    hwl, hwr = track.half_widths_at(s)
    outside = np.where(e_y >= 0.0, e_y > hwl, -e_y > hwr)
    laps = lap_times_from_s(trace.column("t"), s, track.length)
    target = 1 if laps_target is None else laps_target
    return Metrics(
        lap_times=laps,
        violation_time=float(trace.dt * np.count_nonzero(outside)),
        mean_deviation=float(np.mean(np.abs(trace.column("deviation")))),
        avg_compute_time=float(np.mean(trace.column("compute_time"))),
        completed=len(laps) >= target,
        total_mpc_cost=float(np.sum(trace.column("cost"))),
        steps=len(trace),
        sim_time=float(len(trace) * trace.dt),
    )


# --- closed loop ------------------------------------------------------------------


@dataclass(eq=False)
class RunResult:
    trace: RunTrace
    metrics: Metrics
    diverged: bool
    config: ScenarioConfig
    track: Track
    raceline: RaceLine
    bank: Optional[ModelBank] = None


def run_scenario(cfg: ScenarioConfig, bank: Optional[ModelBank] = None) -> RunResult:
    """Simulate one closed-loop run.

    ``bank`` overrides the sampled model bank (used to plant the true model).
    """
    cfg.validate()
    rc = cfg.run
    fixed = cfg.vehicle
    dt = rc.dt
    track, rl, lib = build_planning(cfg)
    schedule = cfg.schedule()
    mpc_cfg = cfg.mpc
    H = mpc_cfg.H_steps
    nominal = np.asarray(cfg.nominal_theta(), dtype=float)
    use_bank = rc.controller == "lla"
    if use_bank and bank is None:
        bank = sample_bank(nominal, cfg.bank.range_fraction, cfg.bank.N, cfg.bank.seed)
    window = ErrorWindow(cfg.W_steps, bank.N, np.asarray(cfg.bank.weights, float), rc.workers) if use_bank else None
    preds = np.empty((bank.N, 7)) if use_bank else None
    est = FrictionEstimate(cfg.estimator.gamma, cfg.estimator.mu_init)
    noise_rng = np.random.default_rng([cfg.mpc.seed, 0x6E6F697365])
    noise_std = np.asarray(rc.noise_std, dtype=float)
    noisy = bool(np.any(noise_std > 0))

    if rc.v0 is None:
        s0 = rl.s_rl[rc.start_index % len(rl.s_rl)]
        v0 = float(rl.interp(s0, lib.profile_for(friction_of(schedule.theta_0, fixed))))
    else:
        v0 = rc.v0
    x = initial_state(rl, rc.start_index, v0, fixed)
    max_steps = int(math.ceil(rc.max_time / dt - 1e-9))
    data = np.zeros((max_steps, len(TRACE_COLUMNS)))
    L = track.length
    s_prev = project(track, x[:2]).s
    s_rl = project(rl.path, x[:2]).s
    lap = 0
    fired = False
    u_prev = np.zeros(2)
    x_meas_prev = None
    warm: Optional[Solution] = None
    diverged = False
    n = 0
    width = float(np.mean(track.half_width_left + track.half_width_right))
    for k in range(max_steps):
        t = k * dt
        fired = fired or (schedule.kind == "step_drop" and schedule.triggered(t, lap, s_prev / L))
        theta_true = np.asarray(schedule_eval(schedule, t, lap, s_prev / L, fired), dtype=float)
        mu_true = friction_of(theta_true, fixed)
        x_meas = x + noise_rng.standard_normal(7) * noise_std if noisy else x

        tic = time.perf_counter()
        j_star = WARMUP_SENTINEL
        if rc.controller == "oracle":
            theta_use, mu_hat = theta_true, mu_true
        elif rc.controller == "fixed_nominal":
            theta_use, mu_hat = nominal, friction_of(nominal, fixed)
        else:
            if x_meas_prev is not None:
                predict_all(bank, x_meas_prev, u_prev, dt, fixed, rc.workers, out=preds)
                window.update(x_meas, preds)
            if window.warm:
                j_star = select_best(window)
                theta_use = bank.thetas[j_star]
                mu_hat = est.update(theta_use[4], theta_use[5], fixed.m, fixed.g)
            else:
                theta_use, mu_hat = nominal, est.mu
        ref = reference(rl, lib, mu_hat, x_meas, H, dt, hint_s=s_rl)
        sol = solve(theta_use, x_meas, ref, mpc_cfg, warm, fixed=fixed, u_prev=u_prev, dt=dt, key=k,
                    workers=rc.workers)
        compute = time.perf_counter() - tic

        u = sol.inputs[0].copy()
        try:
            x_next = rk4_step(None, x, u, dt, fixed=fixed, theta=theta_true, dt_steer=dt, substeps=rc.substeps,
                              delta_max=fixed.delta_max)
        except IntegrationError:
            diverged = True
            break
        pose = project(track, x_next[:2], hint_s=s_prev)
        if abs(pose.e_y) > 5 * width or not np.isfinite(pose.e_y):
            # far off the track: relocate globally once before declaring divergence
            pose = project(track, x_next[:2])
        rl_pose = project(rl.path, x_next[:2], hint_s=s_rl)
        s_rl, dev = rl_pose.s, rl_pose.e_y
        lap += lap_counter(s_prev, pose.s, L)
        data[n] = (t + dt, *x_next, u[0], u[1], mu_true, mu_hat, j_star, pose.s, pose.e_y, dev, lap, sol.cost,
                   compute)
        n += 1
        x_meas_prev = x_meas
        u_prev = u
        warm = sol
        x = x_next
        s_prev = pose.s
        if abs(pose.e_y) > rc.divergence_widths * width:
            diverged = True
            break
        if lap >= rc.laps:
            break

    trace = RunTrace(data[:n], dt)
    if n == 0:
        metrics = Metrics([], 0.0, 0.0, 0.0, False, 0.0, 0, 0.0)
    else:
        metrics = compute_metrics(trace, track, rl, rc.laps)
    if diverged:
        metrics.completed = False
    result = RunResult(trace, metrics, diverged, cfg, track, rl, bank)
    if cfg.output.dir:
        write_outputs(result, cfg.output.dir)
    return result


def write_outputs(result: RunResult, out_dir) -> Path:
    """Trace CSV, metrics JSON (no timing), timing JSON and the resolved config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.trace.to_csv(out / "trace.csv")
    (out / "metrics.json").write_text(result.metrics.to_json() + "\n")
    (out / "timing.json").write_text(json.dumps({"avg_compute_time": result.metrics.avg_compute_time}) + "\n")
    (out / "config.json").write_text(result.config.to_json() + "\n")
    if result.config.output.dump_bank and result.bank is not None:
        result.bank.save(out / "bank.npz")
    return out


# --- sweeps -------------------------------------------------------------------------


def _sweep(cfgs: Sequence[Tuple[float, ScenarioConfig]], seeds: Sequence[int]):
    rows = []
    for value, cfg in cfgs:
        costs = [run_scenario(cfg.with_seed(s)).metrics.total_mpc_cost for s in seeds]
        rows.append((value, float(np.median(costs)), costs))
    return rows


def sweep_bank_size(cfg: ScenarioConfig, N_list: Sequence[int], seeds: Sequence[int]):
    """Median total MPC cost per bank size, each run under the gradual-decay schedule.

    Returns ``[(N, median_cost, per_seed_costs), ...]``.
    """
    if len(N_list) < 2:
        raise ConfigError("need at least two bank sizes")
    if len(seeds) < 3:
        raise ConfigError("need at least three seeds")
    base = cfg.with_preset("exp1").replace(**{"run.controller": "lla"})
    return _sweep([(int(N), base.replace(**{"bank.N": int(N)})) for N in N_list], seeds)


def sweep_window(cfg: ScenarioConfig, W_list: Sequence[float], seeds: Sequence[int]):
    """Median total MPC cost per look-back window length (seconds), under ``cfg``'s schedule."""
    if len(W_list) < 2:
        raise ConfigError("need at least two window lengths")
    if len(seeds) < 3:
        raise ConfigError("need at least three seeds")
    base = cfg.replace(**{"run.controller": "lla"})
    return _sweep([(float(W), base.replace(**{"bank.W_s": float(W)})) for W in W_list], seeds)
