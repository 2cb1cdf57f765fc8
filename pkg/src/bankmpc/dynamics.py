"""Dynamic bicycle model with Pacejka lateral tires.

State layout ``[x, y, phi, vx, vy, omega, delta]``; input ``[d, ddelta]``
where ``ddelta`` is the steering change over one control period.
Tire/surface parameters ``[B_f, B_r, C_f, C_r, D_f, D_r, C_ro, C_d]``.

The scalar kernels are numba-compiled so that the model bank and the MPC
sampler can call them in tight loops.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, NamedTuple, Optional

import numpy as np
from numba import njit

STATE_DIM = 7
INPUT_DIM = 2
THETA_DIM = 8
VX_FLOOR = 0.05

THETA_FIELDS = ("B_f", "B_r", "C_f", "C_r", "D_f", "D_r", "C_ro", "C_d")
STATE_FIELDS = ("x", "y", "phi", "vx", "vy", "omega", "delta")


class IntegrationError(FloatingPointError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class VehicleState(NamedTuple):
    x: float = 0.0
    y: float = 0.0
    phi: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0
    delta: float = 0.0


class ControlInput(NamedTuple):
    d: float = 0.0
    ddelta: float = 0.0


class TireSurfaceParams(NamedTuple):
    B_f: float
    B_r: float
    C_f: float
    C_r: float
    D_f: float
    D_r: float
    C_ro: float
    C_d: float

    def validate(self) -> "TireSurfaceParams":
        vals = np.asarray(self, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("tire parameters must be finite")
        if np.any(vals[:6] <= 0):
            raise ValueError("B, C, D tire parameters must be positive")
        if np.any(vals[6:] < 0):
            raise ValueError("C_ro and C_d must be non-negative")
        return self


@dataclass(frozen=True)
class VehicleFixedParams:
    """Parameters treated as known: mass, inertia, geometry, motor, limits."""

    m: float = 0.041
    I_z: float = 27.8e-6
    l_f: float = 0.029
    l_r: float = 0.033
    g: float = 9.81
    C_m1: float = 0.287
    C_m2: float = 0.0545
    delta_max: float = 0.35
    d_min: float = -1.0
    d_max: float = 1.0
    ddelta_max: float = 0.05
    p: float = 0.0
    r: float = 0.0

    def __post_init__(self):
        for name in ("m", "I_z", "l_f", "l_r", "g", "delta_max", "ddelta_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")

    def as_array(self) -> np.ndarray:
        """Packed layout consumed by the kernels."""
        return np.array([self.m, self.I_z, self.l_f, self.l_r, self.g, self.C_m1, self.C_m2,
                         math.sin(self.p), math.sin(self.r)])

    def to_dict(self) -> dict:
        return asdict(self)


@njit(cache=True, inline="always", error_model="numpy")
def _deriv(x, d, ddelta, fp, th, dt_steer, vx_floor, out):
    m = fp[0]
    iz = fp[1]
    lf = fp[2]
    lr = fp[3]
    g = fp[4]
    phi = x[2]
    vx = x[3]
    vy = x[4]
    om = x[5]
    delta = x[6]
    vxe = vx if vx > vx_floor else vx_floor
    alpha_f = delta - math.atan((om * lf + vy) / vxe)
    alpha_r = math.atan((om * lr - vy) / vxe)
    ffy = th[4] * math.sin(th[2] * math.atan(th[0] * alpha_f))
    fry = th[5] * math.sin(th[3] * math.atan(th[1] * alpha_r))
    frx = (fp[5] - fp[6] * vx) * d - th[6] - th[7] * vx * vx
    cphi = math.cos(phi)
    sphi = math.sin(phi)
    sd = math.sin(delta)
    cd = math.cos(delta)
    out[0] = vx * cphi - vy * sphi
    out[1] = vx * sphi + vy * cphi
    out[2] = om
    out[3] = (frx - ffy * sd) / m + vy * om - g * fp[7]
    out[4] = (fry + ffy * cd) / m - vx * om + g * fp[8]
    out[5] = (ffy * lf * cd - fry * lr) / iz
    out[6] = ddelta / dt_steer


@njit(cache=True, error_model="numpy")
def _rk4_inplace(x, d, ddelta, fp, th, dt, dt_steer, delta_max, vx_floor, k1, k2, k3, k4, tmp, out):
    _deriv(x, d, ddelta, fp, th, dt_steer, vx_floor, k1)
    for i in range(7):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    _deriv(tmp, d, ddelta, fp, th, dt_steer, vx_floor, k2)
    for i in range(7):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    _deriv(tmp, d, ddelta, fp, th, dt_steer, vx_floor, k3)
    for i in range(7):
        tmp[i] = x[i] + dt * k3[i]
    _deriv(tmp, d, ddelta, fp, th, dt_steer, vx_floor, k4)
    for i in range(7):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    if out[6] > delta_max:
        out[6] = delta_max
    elif out[6] < -delta_max:
        out[6] = -delta_max


@njit(cache=True, error_model="numpy")
def rk4_kernel(x, d, ddelta, fp, th, dt, dt_steer, delta_max, vx_floor, n_sub):
    """``n_sub`` RK4 substeps of length ``dt / n_sub`` with the input held."""
    k1 = np.empty(7)
    k2 = np.empty(7)
    k3 = np.empty(7)
    k4 = np.empty(7)
    tmp = np.empty(7)
    cur = x.copy()
    nxt = np.empty(7)
    h = dt / n_sub
    for _ in range(n_sub):
        _rk4_inplace(cur, d, ddelta, fp, th, h, dt_steer, delta_max, vx_floor, k1, k2, k3, k4, tmp, nxt)
        cur[:] = nxt
    return cur


@njit(cache=True, nogil=True, error_model="numpy")
def batch_rk4_kernel(thetas, x, d, ddelta, fp, dt, delta_max, vx_floor, out, start, stop):
    """One RK4 step of every model ``thetas[start:stop]`` from the same state."""
    k1 = np.empty(7)
    k2 = np.empty(7)
    k3 = np.empty(7)
    k4 = np.empty(7)
    tmp = np.empty(7)
    nxt = np.empty(7)
    for j in range(start, stop):
        _rk4_inplace(x, d, ddelta, fp, thetas[j], dt, dt, delta_max, vx_floor, k1, k2, k3, k4, tmp, nxt)
        for i in range(7):
            out[j, i] = nxt[i]


@njit(cache=True)
def _deriv_alloc(x, d, ddelta, fp, th, dt_steer, vx_floor):
    out = np.empty(7)
    _deriv(x, d, ddelta, fp, th, dt_steer, vx_floor, out)
    return out


def slip_angles(state, l_f: float, l_r: float, vx_floor: float = VX_FLOOR):
    """Front and rear slip angles (rad)."""
    _, _, _, vx, vy, omega, delta = (float(v) for v in state)
    vxe = max(vx, vx_floor)
    alpha_f = delta - math.atan((omega * l_f + vy) / vxe)
    alpha_r = math.atan((omega * l_r - vy) / vxe)
    return alpha_f, alpha_r


def pacejka_lateral(alpha, B, C, D):
    """Lateral tire force ``D sin(C atan(B alpha))``; works on arrays."""
    return D * np.sin(C * np.arctan(B * np.asarray(alpha, dtype=float)))


def longitudinal_force(vx, d, C_m1, C_m2, C_ro, C_d):
    return (C_m1 - C_m2 * vx) * d - C_ro - C_d * vx * vx


def _as_theta(theta) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(theta, dtype=float))


def dbm_derivative(state, control, fixed: VehicleFixedParams, theta, dt_steer: float, vx_floor: float = VX_FLOOR) -> np.ndarray:
    """Time derivative of the state under the dynamic bicycle model."""
    if not dt_steer > 0:
        raise ValueError("dt_steer must be positive")
    x = np.asarray(state, dtype=float)
    d, ddelta = (float(v) for v in control)
    return _deriv_alloc(x, d, ddelta, fixed.as_array(), _as_theta(theta), float(dt_steer), float(vx_floor))


def rk4_step(
    derivative_fn: Optional[Callable] = None,
    state=None,
    control=None,
    dt: float = 0.02,
    *,
    fixed: Optional[VehicleFixedParams] = None,
    theta=None,
    dt_steer: Optional[float] = None,
    substeps: int = 1,
    delta_max: Optional[float] = None,
    vx_floor: float = VX_FLOOR,
) -> np.ndarray:
    """Classical RK4 with the input held over ``dt``.

    With ``derivative_fn`` given, it is called as ``f(state, control)`` and
    integrated generically. Otherwise the compiled bicycle model is used with
    ``fixed``/``theta``; ``dt_steer`` defaults to ``dt`` and the interval is
    split into ``substeps`` equal RK4 steps. The steering angle is clamped to
    ``delta_max`` after the step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(state, dtype=float)
    if derivative_fn is not None:
        h = dt / substeps
        cur = x.copy()
        for _ in range(substeps):
            k1 = np.asarray(derivative_fn(cur, control), dtype=float)
            k2 = np.asarray(derivative_fn(cur + 0.5 * h * k1, control), dtype=float)
            k3 = np.asarray(derivative_fn(cur + 0.5 * h * k2, control), dtype=float)
            k4 = np.asarray(derivative_fn(cur + h * k3, control), dtype=float)
            cur = cur + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if delta_max is not None and cur.shape[0] == STATE_DIM:
                cur[6] = min(max(cur[6], -delta_max), delta_max)
        out = cur
    else:
        if fixed is None or theta is None:
            raise ValueError("either derivative_fn or fixed+theta is required")
        d, ddelta = (float(v) for v in control)
        dmax = fixed.delta_max if delta_max is None else delta_max
        out = rk4_kernel(x, d, ddelta, fixed.as_array(), _as_theta(theta), float(dt),
                         float(dt if dt_steer is None else dt_steer), float(dmax), float(vx_floor), int(substeps))
    if not np.all(np.isfinite(out)):
        raise IntegrationError("integration diverged", state=x.copy())
    return out


@dataclass(frozen=True)
class ParamSchedule:
    """Time-varying ground-truth tire/surface parameters.

    ``kind`` is ``constant``, ``linear_decay`` (``decay_rate`` fraction per
    second) or ``step_drop`` (``drop_fraction`` once the trigger fires).
    ``trigger`` is ``time`` (``trigger_value`` seconds), ``lap`` (fires once
    ``trigger_value`` laps are completed) or ``position`` (fires during lap
    ``trigger_lap`` once the arc-length fraction reaches ``trigger_value``).
    """

    theta_0: TireSurfaceParams
    kind: str = "constant"
    decay_rate: float = 0.0
    drop_fraction: float = 0.4
    trigger: str = "time"
    trigger_value: float = 0.0
    trigger_lap: int = 0
    scale_shape: bool = False
    floor: float = 0.05

    def __post_init__(self):
        if self.kind not in ("constant", "linear_decay", "step_drop"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.trigger not in ("time", "lap", "position"):
            raise ValueError(f"unknown trigger {self.trigger!r}")
        if self.kind == "step_drop" and not 0 < self.drop_fraction < 1:
            raise ValueError("drop_fraction must lie in (0, 1)")
        object.__setattr__(self, "theta_0", TireSurfaceParams(*self.theta_0).validate())

    def triggered(self, t: float, lap: int = 0, s_frac: float = 0.0) -> bool:
        if self.trigger == "time":
            return t >= self.trigger_value
        if self.trigger == "lap":
            return lap >= self.trigger_value
        return lap > self.trigger_lap or (lap == self.trigger_lap and s_frac >= self.trigger_value)

    def scale(self, t: float, lap: int = 0, s_frac: float = 0.0, fired: Optional[bool] = None) -> float:
        """Multiplier applied to the scaled components at time ``t``."""
        if self.kind == "linear_decay":
            return max(1.0 - self.decay_rate * t, self.floor)
        if self.kind == "step_drop":
            hit = self.triggered(t, lap, s_frac) if fired is None else fired
            return 1.0 - self.drop_fraction if hit else 1.0
        return 1.0

    def with_theta(self, theta_0) -> "ParamSchedule":
        return replace(self, theta_0=TireSurfaceParams(*theta_0))


def scale_theta(theta: TireSurfaceParams, factor: float, scale_shape: bool = False) -> TireSurfaceParams:
    """Scale D (and optionally B, C) of ``theta`` by ``factor``."""
    if factor == 1.0:
        return theta
    v = list(theta)
    idx = (0, 1, 2, 3, 4, 5) if scale_shape else (4, 5)
    for i in idx:
        v[i] *= factor
    return TireSurfaceParams(*v)


def schedule_eval(schedule: ParamSchedule, t: float, lap: int = 0, s_frac: float = 0.0,
                  fired: Optional[bool] = None) -> TireSurfaceParams:
    """True parameters at time ``t`` (and lap/position for drop triggers)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return scale_theta(schedule.theta_0, schedule.scale(t, lap, s_frac, fired), schedule.scale_shape)


def friction_of(theta, fixed: VehicleFixedParams) -> float:
    """Normalized peak lateral grip of a parameter vector."""
    return (theta[4] + theta[5]) / (2.0 * fixed.m * fixed.g)
