"""Plain-Python reference implementations used as test oracles."""

import math

import numpy as np


def reference_derivative(x, u, fp, th, dt_steer, vx_floor=0.05):
    X, Y, phi, vx, vy, om, de = x
    d, dd = u
    Bf, Br, Cf, Cr, Df, Dr, Cro, Cd = th
    v = max(vx, vx_floor)
    af = de - math.atan2(om * fp.l_f + vy, v)
    ar = math.atan2(om * fp.l_r - vy, v)
    Ffy = Df * math.sin(Cf * math.atan(Bf * af))
    Fry = Dr * math.sin(Cr * math.atan(Br * ar))
    Frx = (fp.C_m1 - fp.C_m2 * vx) * d - Cro - Cd * vx ** 2
    return [
        vx * math.cos(phi) - vy * math.sin(phi),
        vx * math.sin(phi) + vy * math.cos(phi),
        om,
        (Frx - Ffy * math.sin(de)) / fp.m + vy * om,
        (Fry + Ffy * math.cos(de)) / fp.m - vx * om,
        (Ffy * fp.l_f * math.cos(de) - Fry * fp.l_r) / fp.I_z,
        dd / dt_steer,
    ]


def reference_rk4(x, u, fp, th, dt):
    def f(s):
        return np.array(reference_derivative(s, u, fp, th, dt))

    x = np.asarray(x, dtype=float)
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    out = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out[6] = min(max(out[6], -fp.delta_max), fp.delta_max)
    return out


def reference_cost(theta, x0, inputs, ref, cfg, fp, u_prev=(0.0, 0.0), dt=0.02):
    """Scalar-loop tracking cost; ``ref`` rows are x, y, phi, v, offset, hw_left, hw_right."""
    def tracking(x, r):
        dphi = math.remainder(x[2] - r[2], 2 * math.pi)
        return (cfg.q_pos * ((x[0] - r[0]) ** 2 + (x[1] - r[1]) ** 2) + cfg.q_phi * dphi ** 2
                + cfg.q_v * (x[3] - r[3]) ** 2)

    def boundary(x, r):
        nx, ny = -math.sin(r[2]), math.cos(r[2])
        e_y = r[4] + (x[0] - r[0]) * nx + (x[1] - r[1]) * ny
        left = max(0.0, e_y - (r[5] - cfg.boundary_margin))
        right = max(0.0, -e_y - (r[6] - cfg.boundary_margin))
        return cfg.boundary_weight * (left ** 2 + right ** 2)

    x = np.asarray(x0, dtype=float)
    prev = list(u_prev)
    total = 0.0
    for k, (d, dd) in enumerate(inputs):
        total += tracking(x, ref[k]) + boundary(x, ref[k])
        total += cfg.r_d * d ** 2 + cfg.r_ddelta * dd ** 2
        total += cfg.r_rate[0] * (d - prev[0]) ** 2 + cfg.r_rate[1] * (dd - prev[1]) ** 2
        prev = [d, dd]
        x = reference_rk4(x, (d, dd), fp, theta, dt)
    H = len(inputs)
    total += cfg.terminal_scale * tracking(x, ref[H]) + boundary(x, ref[H])
    return total
