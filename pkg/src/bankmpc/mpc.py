"""Receding-horizon tracking controller solved by cross-entropy sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numba import njit

from .bank import _pool, chunk_bounds
from .dynamics import VX_FLOOR, VehicleFixedParams, _rk4_inplace, schedule_eval
from .planner import ReferenceTrajectory

COST_SENTINEL = 1e12


@dataclass(frozen=True)
class MPCConfig:
    H_steps: int = 20
    q_pos: float = 40.0
    q_phi: float = 1.0
    q_v: float = 1.0
    r_d: float = 0.0
    r_ddelta: float = 1.0
    r_rate: tuple = (1.0, 100.0)
    terminal_scale: float = 2.0
    boundary_weight: float = 2000.0
    boundary_margin: float = 0.02
    d_min: float = -1.0
    d_max: float = 1.0
    ddelta_max: float = 0.05
    samples: int = 64
    elites: int = 8
    iterations: int = 4
    noise: tuple = (0.1, 0.05)
    noise_decay: float = 0.7
    # AR(1) coefficient of the perturbations along the horizon; 0 gives white noise
    noise_correlation: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.H_steps < 1:
            raise ValueError("H_steps must be >= 1")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not 1 <= self.elites <= self.samples:
            raise ValueError("elites must lie in [1, samples]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        weights = (self.q_pos, self.q_phi, self.q_v, self.r_d, self.r_ddelta, self.terminal_scale,
                   self.boundary_weight, *self.r_rate)
        if any(w < 0 for w in weights):
            raise ValueError("cost weights must be non-negative")
        if not 0.0 <= self.noise_correlation < 1.0:
            raise ValueError("noise_correlation must lie in [0, 1)")
        if not self.d_min < self.d_max or not self.ddelta_max > 0:
            raise ValueError("invalid input bounds")
        object.__setattr__(self, "r_rate", tuple(float(v) for v in self.r_rate))
        object.__setattr__(self, "noise", tuple(float(v) for v in self.noise))

    def weight_vector(self) -> np.ndarray:
        return np.array([self.q_pos, self.q_phi, self.q_v, self.r_d, self.r_ddelta, self.r_rate[0],
                         self.r_rate[1], self.terminal_scale, self.boundary_weight, self.boundary_margin])

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.d_min, -self.ddelta_max])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.d_max, self.ddelta_max])


@dataclass(eq=False)
class Solution:
    inputs: np.ndarray
    predicted_states: np.ndarray
    cost: float
    iteration_costs: List[float] = field(default_factory=list)

    def shifted(self) -> np.ndarray:
        """Inputs advanced by one step, the last input repeated."""
        return np.concatenate([self.inputs[1:], self.inputs[-1:]], axis=0)


@njit(cache=True, inline="always")
def _stage(x, r, w, scale):
    dx = x[0] - r[0]
    dy = x[1] - r[1]
    dphi = (x[2] - r[2] + math.pi) % (2.0 * math.pi) - math.pi
    dv = x[3] - r[3]
    track = scale * (w[0] * (dx * dx + dy * dy) + w[1] * dphi * dphi + w[2] * dv * dv)
    # lateral position relative to the centerline, via the reference normal
    lat = r[4] - dx * math.sin(r[2]) + dy * math.cos(r[2])
    pen = 0.0
    over = lat - (r[5] - w[9])
    if over > 0.0:
        pen += over * over
    over = -lat - (r[6] - w[9])
    if over > 0.0:
        pen += over * over
    return track + w[8] * pen


@njit(cache=True, nogil=True, error_model="numpy")
def _rollout(x0, U, u_prev, th, fp, ref, w, dt, delta_max, vx_floor, states):
    """Cost of one input sequence; ``states`` receives the H+1 predicted states."""
    H = U.shape[0]
    k1 = np.empty(7)
    k2 = np.empty(7)
    k3 = np.empty(7)
    k4 = np.empty(7)
    tmp = np.empty(7)
    for i in range(7):
        states[0, i] = x0[i]
    cost = 0.0
    pd = u_prev[0]
    pdd = u_prev[1]
    for k in range(H):
        d = U[k, 0]
        dd = U[k, 1]
        cost += _stage(states[k], ref[k], w, 1.0)
        cost += w[3] * d * d + w[4] * dd * dd
        cost += w[5] * (d - pd) * (d - pd) + w[6] * (dd - pdd) * (dd - pdd)
        pd = d
        pdd = dd
        _rk4_inplace(states[k], d, dd, fp, th, dt, dt, delta_max, vx_floor, k1, k2, k3, k4, tmp, states[k + 1])
    cost += _stage(states[H], ref[H], w, w[7])
    if not math.isfinite(cost) or cost > 1e12:
        return 1e12
    return cost


@njit(cache=True, nogil=True)
def _batch_costs(x0, cands, u_prev, th, fp, ref, w, dt, delta_max, vx_floor, out, start, stop):
    H = cands.shape[1]
    states = np.empty((H + 1, 7))
    for c in range(start, stop):
        out[c] = _rollout(x0, cands[c], u_prev, th, fp, ref, w, dt, delta_max, vx_floor, states)


def _evaluate(x0, cands, u_prev, th, fp, ref, w, dt, delta_max, workers):
    out = np.empty(cands.shape[0])
    args = (x0, cands, u_prev, th, fp, ref, w, dt, delta_max, VX_FLOOR, out)
    if workers <= 1:
        _batch_costs(*args, 0, cands.shape[0])
    else:
        futures = [_pool(workers).submit(_batch_costs, *args, a, b) for a, b in chunk_bounds(cands.shape[0], workers)]
        for f in futures:
            f.result()
    return out


def _prepare(model_theta, x0, ref, cfg: MPCConfig, fixed: VehicleFixedParams, u_prev):
    ref_arr = ref.as_array() if isinstance(ref, ReferenceTrajectory) else np.asarray(ref, dtype=float)
    if ref_arr.shape[0] != cfg.H_steps + 1:
        raise ValueError(f"reference must have {cfg.H_steps + 1} samples, got {ref_arr.shape[0]}")
    th = np.ascontiguousarray(np.asarray(model_theta, dtype=float))
    x = np.ascontiguousarray(np.asarray(x0, dtype=float))
    up = np.zeros(2) if u_prev is None else np.asarray(u_prev, dtype=float)
    return th, x, np.ascontiguousarray(ref_arr), up, fixed.as_array()


def rollout_cost(model_theta, x0, inputs, ref, cfg: MPCConfig, fixed: VehicleFixedParams = VehicleFixedParams(),
                 u_prev=None, dt: float = 0.02):
    """Cost and predicted states of a fixed input sequence under ``model_theta``."""
    th, x, ref_arr, up, fp = _prepare(model_theta, x0, ref, cfg, fixed, u_prev)
    U = np.ascontiguousarray(np.asarray(inputs, dtype=float).reshape(-1, 2))
    if U.shape[0] != cfg.H_steps:
        raise ValueError(f"expected {cfg.H_steps} inputs, got {U.shape[0]}")
    states = np.empty((cfg.H_steps + 1, 7))
    cost = _rollout(x, U, up, th, fp, ref_arr, cfg.weight_vector(), float(dt), float(fixed.delta_max), VX_FLOOR, states)
    return float(cost), states


def solve(model_theta, x0, ref, cfg: MPCConfig, warm_start: Optional[Solution] = None, *,
          fixed: VehicleFixedParams = VehicleFixedParams(), u_prev=None, dt: float = 0.02,
          key: int = 0, workers: int = 1) -> Solution:
    """Cross-entropy search over input sequences.

    The first candidate set always holds the shifted warm start and the zero
    sequence, and the incumbent best is carried into every later set, so the
    returned cost never exceeds either. Sampling noise comes from a generator
    seeded with ``(cfg.seed, key)``.
    """
    th, x, ref_arr, up, fp = _prepare(model_theta, x0, ref, cfg, fixed, u_prev)
    w = cfg.weight_vector()
    H = cfg.H_steps
    lo, hi = cfg.lower, cfg.upper
    rng = np.random.default_rng([cfg.seed, key])
    zero = np.zeros((H, 2))
    warm = np.clip(warm_start.shifted(), lo, hi) if warm_start is not None else zero.copy()
    mean = warm.copy()
    sigma = np.array(cfg.noise, dtype=float)
    best_u, best_c = None, np.inf
    history = []
    dtf, dmax = float(dt), float(fixed.delta_max)
    rho = cfg.noise_correlation
    gain = math.sqrt(1.0 - rho * rho)
    for it in range(cfg.iterations):
        noise = rng.standard_normal((cfg.samples, H, 2))
        if rho > 0.0:
            for k in range(1, H):
                noise[:, k] = rho * noise[:, k - 1] + gain * noise[:, k]
        noise *= sigma
        # the first perturbation is the mean itself
        noise[0] = 0.0
        sampled = np.clip(mean[None] + noise, lo, hi)
        head = [warm, zero] if it == 0 else [best_u]
        cands = np.ascontiguousarray(np.concatenate([np.stack(head), sampled], axis=0))
        costs = _evaluate(x, cands, up, th, fp, ref_arr, w, dtf, dmax, workers)
        order = np.argsort(costs, kind="stable")
        if costs[order[0]] < best_c:
            best_c = float(costs[order[0]])
            best_u = cands[order[0]].copy()
        history.append(best_c)
        mean = cands[order[: cfg.elites]].mean(axis=0)
        sigma = sigma * cfg.noise_decay
    states = np.empty((H + 1, 7))
    _rollout(x, best_u, up, th, fp, ref_arr, w, dtf, dmax, VX_FLOOR, states)
    return Solution(best_u, states, best_c, history)


def oracle_step(schedule, t: float, lap: int, x0, ref_true_mu, cfg: MPCConfig, warm_start: Optional[Solution] = None,
                *, fired: Optional[bool] = None, s_frac: float = 0.0, **kw) -> Solution:
    """``solve`` with the true parameters of ``schedule`` at time ``t``.

    ``ref_true_mu`` must be generated from the true friction coefficient.
    """
    theta = schedule_eval(schedule, t, lap, s_frac, fired)
    return solve(theta, x0, ref_true_mu, cfg, warm_start, **kw)
