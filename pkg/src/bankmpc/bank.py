"""Model bank: sampled parameter vectors, one-step prediction, windowed selection."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .dynamics import THETA_DIM, VX_FLOOR, TireSurfaceParams, VehicleFixedParams, batch_rk4_kernel

# error assigned to a model whose prediction is not finite
ERROR_SENTINEL = 1e10
# floor for B, C, D lower bounds, relative to the nominal value
POSITIVE_FLOOR = 0.01


class WindowNotWarm(RuntimeError):
    pass


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, n_rows: int, n_cols: int) -> np.ndarray:
    """Uniform [0, 1) values keyed by ``(seed, row, col)``.

    Each entry depends only on its own key, so the first rows of a larger
    draw equal a smaller draw with the same seed.
    """
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
    rows = np.arange(n_rows, dtype=np.uint64)[:, None]
    cols = np.arange(n_cols, dtype=np.uint64)[None, :]
    # fixed stride so the row count never changes an entry's counter
    ctr = rows * np.uint64(1 << 20) + cols
    z = _splitmix64(_splitmix64(ctr ^ key) + key)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(eq=False)
class ModelBank:
    thetas: np.ndarray
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    nominal: TireSurfaceParams
    seed: int
    structure: str = "dbm"

    @property
    def N(self) -> int:
        return self.thetas.shape[0]

    def theta(self, j: int) -> TireSurfaceParams:
        return TireSurfaceParams(*self.thetas[j])

    def save(self, path) -> None:
        np.savez(path, thetas=self.thetas, bounds_lo=self.bounds_lo, bounds_hi=self.bounds_hi,
                 nominal=np.asarray(self.nominal), seed=self.seed)


def sample_bank(nominal, range_fraction: float, N: int, seed: int = 0) -> ModelBank:
    """Draw ``N`` parameter vectors uniformly within ``nominal * (1 +- range_fraction)``."""
    if N < 1:
        raise ValueError("bank size N must be >= 1")
    if not range_fraction > 0:
        raise ValueError("range_fraction must be positive")
    nom = np.asarray(nominal, dtype=float)
    if nom.shape != (THETA_DIM,) or not np.all(np.isfinite(nom)):
        raise ValueError("nominal parameters must be 8 finite values")
    lo = nom * (1.0 - range_fraction)
    hi = nom * (1.0 + range_fraction)
    lo[:6] = np.maximum(lo[:6], POSITIVE_FLOOR * nom[:6])
    lo[6:] = np.maximum(lo[6:], 0.0)
    u = counter_uniform(seed, N, THETA_DIM)
    thetas = lo + u * (hi - lo)
    thetas = np.minimum(np.maximum(thetas, lo), hi)
    thetas.setflags(write=False)
    return ModelBank(thetas, lo, hi, TireSurfaceParams(*nom), int(seed))


def planted_bank(bank: ModelBank, j: int, theta) -> ModelBank:
    """Copy of ``bank`` with model ``j`` replaced by ``theta``."""
    th = np.array(bank.thetas)
    th[j] = np.asarray(theta, dtype=float)
    th.setflags(write=False)
    return ModelBank(th, bank.bounds_lo, bank.bounds_hi, bank.nominal, bank.seed, bank.structure)


_pools: dict = {}


def _pool(workers: int) -> ThreadPoolExecutor:
    if workers not in _pools:
        _pools[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="bank")
    return _pools[workers]


def chunk_bounds(n: int, workers: int):
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def predict_all(bank: ModelBank, x_prev, u_prev, dt: float, fixed: VehicleFixedParams,
                workers: int = 1, out: Optional[np.ndarray] = None, vx_floor: float = VX_FLOOR) -> np.ndarray:
    """One RK4 step of every bank model from ``(x_prev, u_prev)``.

    Each model writes only its own row, so the result does not depend on the
    number of workers or the order in which chunks finish.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.ascontiguousarray(np.asarray(x_prev, dtype=float))
    d, ddelta = float(u_prev[0]), float(u_prev[1])
    fp = fixed.as_array()
    n = bank.N
    if out is None:
        out = np.empty((n, 7))
    args = (bank.thetas, x, d, ddelta, fp, float(dt), float(fixed.delta_max), float(vx_floor), out)
    if workers <= 1:
        batch_rk4_kernel(*args, 0, n)
    else:
        futures = [_pool(workers).submit(batch_rk4_kernel, *args, a, b) for a, b in chunk_bounds(n, workers)]
        for f in futures:
            f.result()
    return out


@njit(cache=True, nogil=True)
def _squared_errors(x_meas, preds, weights, out, start, stop):
    for j in range(start, stop):
        acc = 0.0
        for i in range(7):
            diff = x_meas[i] - preds[j, i]
            if i == 2:
                diff = (diff + math.pi) % (2.0 * math.pi) - math.pi
            acc += weights[i] * diff * diff
        if not math.isfinite(acc) or acc > 1e10:
            acc = 1e10
        out[j] = acc


def squared_errors(x_meas, preds: np.ndarray, weights, workers: int = 1, out=None) -> np.ndarray:
    """Weighted squared one-step errors, heading differenced on the circle."""
    x = np.ascontiguousarray(np.asarray(x_meas, dtype=float))
    w = np.ascontiguousarray(np.asarray(weights, dtype=float))
    n = preds.shape[0]
    if out is None:
        out = np.empty(n)
    if workers <= 1:
        _squared_errors(x, preds, w, out, 0, n)
    else:
        futures = [_pool(workers).submit(_squared_errors, x, preds, w, out, a, b) for a, b in chunk_bounds(n, workers)]
        for f in futures:
            f.result()
    return out


@dataclass(eq=False)
class ErrorWindow:
    """Ring buffer of the last ``W_steps`` per-model errors plus their running sums.

    Sums are updated by adding the newest and subtracting the oldest error.
    A model whose sum has shrunk far below its peak since the last exact
    summation is recomputed from the ring, and all sums are resynchronized
    once per ring revolution, which keeps cancellation error far below 1e-9
    relative.
    """

    W_steps: int
    N: int
    weights: np.ndarray = field(default_factory=lambda: np.ones(7))
    workers: int = 1

    def __post_init__(self):
        if self.W_steps < 1:
            raise ValueError("W_steps must be >= 1")
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (7,) or np.any(self.weights < 0):
            raise ValueError("weights must be 7 non-negative values")
        self.ring = np.zeros((self.W_steps, self.N))
        self.rolling_sum = np.zeros(self.N)
        self.head = 0
        self.steps_seen = 0
        self._e = np.empty(self.N)
        self._peak = np.zeros(self.N)

    @property
    def warm(self) -> bool:
        return self.steps_seen >= self.W_steps

    def push(self, e: np.ndarray) -> None:
        """Insert one step of per-model errors."""
        old = self.ring[self.head].copy()
        self.ring[self.head] = e
        self.rolling_sum += e
        np.maximum(self._peak, self.rolling_sum, out=self._peak)
        self.rolling_sum -= old
        self.head = (self.head + 1) % self.W_steps
        self.steps_seen += 1
        if self.head == 0:
            self.rolling_sum = self.ring.sum(axis=0)
            self._peak[:] = self.rolling_sum
        else:
            # rounding error scales with the largest value held since the last exact sum
            bad = self._peak > 1e3 * np.abs(self.rolling_sum)
            if bad.any():
                self.rolling_sum[bad] = self.ring[:, bad].sum(axis=0)
                self._peak[bad] = self.rolling_sum[bad]

    def update(self, x_meas, predictions: np.ndarray) -> np.ndarray:
        if predictions.shape[0] != self.N:
            raise ValueError(f"expected {self.N} predictions, got {predictions.shape[0]}")
        e = squared_errors(x_meas, predictions, self.weights, self.workers, out=self._e)
        self.push(e)
        return e

    def naive_sums(self) -> np.ndarray:
        k = min(self.steps_seen, self.W_steps)
        if k == self.W_steps:
            return self.ring.sum(axis=0)
        idx = [(self.head - 1 - i) % self.W_steps for i in range(k)]
        return self.ring[idx].sum(axis=0)

    def max_relative_drift(self) -> float:
        ref = self.naive_sums()
        den = np.maximum(np.abs(ref), 1e-300)
        return float(np.max(np.abs(self.rolling_sum - ref) / den))


def update_errors(window: ErrorWindow, x_meas, predictions: np.ndarray) -> ErrorWindow:
    window.update(x_meas, predictions)
    return window


def select_best(window: ErrorWindow) -> int:
    """Index of the smallest accumulated error; ties go to the lowest index."""
    if not window.warm:
        raise WindowNotWarm("window not warm")
    return int(np.argmin(window.rolling_sum))
