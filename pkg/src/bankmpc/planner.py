"""Raceline, friction-indexed velocity profiles and MPC reference generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .track import Track, TrackError, project, wrap_angle


@dataclass(frozen=True)
class ProfileLimits:
    a_acc_scale: float = 0.5
    a_brake_scale: float = 0.6
    v_max: float = 4.0
    kappa_min: float = 1e-3
    g: float = 9.81


class _LoopInterp:
    """Periodic linear interpolation of per-point quantities along a closed path."""

    def __init__(self, s: np.ndarray, length: float):
        self.length = float(length)
        self.xp = np.append(s, length)

    def __call__(self, s, values: np.ndarray):
        return np.interp(np.mod(s, self.length), self.xp, np.append(values, values[0]))


@dataclass(eq=False)
class RaceLine:
    """Optimized path; point ``i`` sits on the normal of centerline point ``i``."""

    path: Track
    lateral_offset: np.ndarray
    track: Track
    objective_history: list = field(default_factory=list)

    def __post_init__(self):
        self._interp = _LoopInterp(self.path.s, self.path.length)
        self._heading_unwrapped = np.unwrap(np.append(self.path.heading, self.path.heading[0]))[:-1]
        turn = self._heading_unwrapped[-1] + wrap_angle(self.path.heading[0] - self.path.heading[-1])
        self._heading_end = turn

    @property
    def points(self) -> np.ndarray:
        return self.path.centerline

    @property
    def s_rl(self) -> np.ndarray:
        return self.path.s

    @property
    def curvature(self) -> np.ndarray:
        return self.path.curvature

    @property
    def length(self) -> float:
        return self.path.length

    def interp(self, s, values):
        return self._interp(s, values)

    def pose_at(self, s):
        """(x, y, heading) on the raceline at arc length(s) ``s``."""
        s = np.mod(np.asarray(s, dtype=float), self.path.length)
        xp = self._interp.xp
        c = self.path.centerline
        x = np.interp(s, xp, np.append(c[:, 0], c[0, 0]))
        y = np.interp(s, xp, np.append(c[:, 1], c[0, 1]))
        h = np.interp(s, xp, np.append(self._heading_unwrapped, self._heading_end))
        return x, y, wrap_angle(h)


def _menger_curvature(p: np.ndarray) -> np.ndarray:
    a = p - np.roll(p, 1, axis=0)
    b = np.roll(p, -1, axis=0) - p
    c = a + b
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    den = np.hypot(a[:, 0], a[:, 1]) * np.hypot(b[:, 0], b[:, 1]) * np.hypot(c[:, 0], c[:, 1])
    return 2.0 * cross / den


def _color_groups(n: int):
    """Index groups whose members are >= 3 apart around the loop.

    Perturbing one group then changes disjoint sets of curvature terms.
    """
    if n < 6:
        return [np.array([i]) for i in range(n)]
    full = 3 * (n // 3)
    return [np.arange(r, full, 3) for r in range(3)] + [np.array([i]) for i in range(full, n)]


def min_curvature_raceline(track: Track, margin: float = 0.02, iters: int = 100, step: float = 0.05) -> RaceLine:
    """Lateral offsets minimizing the summed squared discrete curvature.

    Projected descent on the offsets along the centerline normals. The raw
    gradient is badly conditioned (offsets act through a second derivative),
    so on the offsets not pinned at a bound it is scaled by the Gauss-Newton
    curvature Hessian; pinned offsets whose gradient pushes outward are held
    fixed for the iteration. Moves are capped at ``step`` metres and only
    strict decreases of the objective are accepted, so it never rises.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    hi = track.half_width_left - margin
    lo = -(track.half_width_right - margin)
    if np.any(hi <= 0) or np.any(lo >= 0):
        raise TrackError("track too narrow for the requested margin")
    base = track.centerline
    nrm = track.normals
    n = track.n_points
    groups = _color_groups(n)

    def curvature(alpha):
        return _menger_curvature(base + alpha[:, None] * nrm)

    def jacobian(alpha):
        h = 1e-7
        jac = np.zeros((n, n))
        for g in groups:
            ap = alpha.copy()
            ap[g] += h
            am = alpha.copy()
            am[g] -= h
            dk = (curvature(ap) - curvature(am)) / (2 * h)
            for off in (-1, 0, 1):
                r = (g + off) % n
                jac[r, g] = dk[r]
        return jac

    alpha = np.zeros(n)
    k = curvature(alpha)
    J = float(k @ k)
    history = [J]
    for _ in range(iters):
        jac = jacobian(alpha)
        grad = 2.0 * jac.T @ k
        hess = 2.0 * jac.T @ jac
        tol = 1e-9
        pinned = ((alpha <= lo + tol) & (grad > 0)) | ((alpha >= hi - tol) & (grad < 0))
        free = ~pinned
        direction = np.zeros(n)
        if free.any():
            hf = hess[np.ix_(free, free)]
            hf[np.diag_indices_from(hf)] += 1e-10 * max(float(np.max(np.diag(hf))), 1.0)
            direction[free] = np.linalg.solve(hf, grad[free])
        if not np.any(direction):
            break
        t = 1.0
        accepted = False
        for _ in range(40):
            delta = -t * direction
            big = np.max(np.abs(delta))
            if big > step:
                delta *= step / big
            cand = np.clip(alpha + delta, lo, hi)
            kc = curvature(cand)
            Jc = float(kc @ kc)
            if Jc < J:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        alpha, k = cand, kc
        converged = J - Jc <= 1e-12 * J
        J = Jc
        history.append(J)
        if converged:
            break
    pts = base + alpha[:, None] * nrm
    path = Track.from_points(pts, hi - alpha + margin, alpha - lo + margin)
    return RaceLine(path=path, lateral_offset=alpha, track=track, objective_history=history)


def velocity_profile(raceline: RaceLine, mu: float, limits: ProfileLimits = ProfileLimits()) -> np.ndarray:
    """Friction-limited speed along the raceline (forward/backward passes)."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    kappa = np.maximum(np.abs(raceline.curvature), limits.kappa_min)
    v = np.minimum(limits.v_max, np.sqrt(mu * limits.g / kappa))
    ds = raceline.path.segment_lengths
    a_acc = limits.a_acc_scale * mu * limits.g
    a_brk = limits.a_brake_scale * mu * limits.g
    n = len(v)
    v2 = v * v
    for _ in range(2):
        for i in range(n):
            j = (i + 1) % n
            cap = v2[i] + 2.0 * a_acc * ds[i]
            if v2[j] > cap:
                v2[j] = cap
    for _ in range(2):
        for i in range(n - 1, -1, -1):
            j = (i + 1) % n
            cap = v2[j] + 2.0 * a_brk * ds[i]
            if v2[i] > cap:
                v2[i] = cap
    return np.sqrt(v2)


@dataclass(eq=False)
class VelocityProfileLibrary:
    mu_grid: np.ndarray
    profiles: np.ndarray
    limits: ProfileLimits
    raceline: RaceLine

    @property
    def mu_min(self) -> float:
        return float(self.mu_grid[0])

    @property
    def mu_max(self) -> float:
        return float(self.mu_grid[-1])

    def profile_for(self, mu: float) -> np.ndarray:
        """Linear blend of the two profiles bracketing ``mu`` (clamped to the grid)."""
        mu = min(max(mu, self.mu_min), self.mu_max)
        i = int(np.searchsorted(self.mu_grid, mu, side="right")) - 1
        i = min(max(i, 0), len(self.mu_grid) - 2)
        m0, m1 = self.mu_grid[i], self.mu_grid[i + 1]
        w = (mu - m0) / (m1 - m0)
        if w <= 0.0:
            return self.profiles[i]
        if w >= 1.0:
            return self.profiles[i + 1]
        return (1.0 - w) * self.profiles[i] + w * self.profiles[i + 1]

    def to_csv(self, path) -> None:
        header = ["s", "kappa"] + [f"v_mu{m:g}" for m in self.mu_grid]
        data = np.column_stack([self.raceline.s_rl, self.raceline.curvature, self.profiles.T])
        np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt="%.17g")


def build_library(raceline: RaceLine, mu_min: float = 0.3, mu_max: float = 1.2, n_profiles: int = 9,
                  limits: ProfileLimits = ProfileLimits()) -> VelocityProfileLibrary:
    if not 0 < mu_min < mu_max:
        raise ValueError("need 0 < mu_min < mu_max")
    if n_profiles < 2:
        raise ValueError("n_profiles must be >= 2")
    grid = np.linspace(mu_min, mu_max, n_profiles)
    profiles = np.array([velocity_profile(raceline, float(m), limits) for m in grid])
    return VelocityProfileLibrary(grid, profiles, limits, raceline)


@dataclass(frozen=True, eq=False)
class ReferenceTrajectory:
    """``H + 1`` samples spaced one control period apart along the raceline.

    ``offset`` is the raceline's lateral offset from the centerline and
    ``hw_left``/``hw_right`` the track half widths at each sample; the MPC uses
    them for its boundary penalty.
    """

    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    v: np.ndarray
    s: np.ndarray
    offset: np.ndarray
    hw_left: np.ndarray
    hw_right: np.ndarray

    def __len__(self):
        return len(self.x)

    def as_array(self) -> np.ndarray:
        """(H+1, 7) array ``[x, y, phi, v, offset, hw_left, hw_right]``."""
        return np.column_stack((self.x, self.y, self.phi, self.v, self.offset, self.hw_left, self.hw_right))


def reference(raceline: RaceLine, library: VelocityProfileLibrary, mu_hat: float, state, H_steps: int, dt: float,
              hint_s: Optional[float] = None, profile: Optional[np.ndarray] = None) -> ReferenceTrajectory:
    """Reference along the raceline starting at the vehicle's projection."""
    st = np.asarray(state, dtype=float)
    if profile is None:
        profile = library.profile_for(mu_hat)
    pose = project(raceline.path, st[:2], hint_s=hint_s)
    s = np.empty(H_steps + 1)
    v = np.empty(H_steps + 1)
    s[0] = pose.s
    interp = raceline.interp
    for i in range(H_steps + 1):
        v[i] = float(interp(s[i], profile))
        if i < H_steps:
            s[i + 1] = s[i] + v[i] * dt
    s_mod = np.mod(s, raceline.length)
    x, y, phi = raceline.pose_at(s_mod)
    offset = interp(s_mod, raceline.lateral_offset)
    hwl = interp(s_mod, raceline.track.half_width_left)
    hwr = interp(s_mod, raceline.track.half_width_right)
    return ReferenceTrajectory(x, y, phi, v, s_mod, offset, hwl, hwr)
