"""Friction estimate from the peak lateral forces of the selected model."""

from __future__ import annotations

from dataclasses import dataclass, field


def raw_friction(D_f: float, D_r: float, m: float, g: float) -> float:
    if not (m > 0 and g > 0):
        raise ValueError("m and g must be positive")
    return (D_f + D_r) / (2.0 * m * g)


def smooth(mu_prev: float, mu_raw: float, gamma: float) -> float:
    """Exponential smoothing step."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    return gamma * mu_raw + (1.0 - gamma) * mu_prev


@dataclass
class FrictionEstimate:
    gamma: float = 0.05
    mu_init: float = 1.0
    mu: float = field(init=False)
    mu_raw: float = field(init=False)

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not self.mu_init > 0:
            raise ValueError("mu_init must be positive")
        self.mu = self.mu_init
        self.mu_raw = self.mu_init

    def update(self, D_f: float, D_r: float, m: float, g: float) -> float:
        self.mu_raw = raw_friction(D_f, D_r, m, g)
        self.mu = smooth(self.mu, self.mu_raw, self.gamma)
        return self.mu
