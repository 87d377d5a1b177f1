"""Uniform time grid and the shared numerical tolerance table."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# One table for every threshold used across modules.  Values are absolute
# unless the name says otherwise.
TOLERANCES = {
    "resolvent_closed_form": 1e-8,  # ||K*L - 1||_inf, closed-form L
    "resolvent_deconvolved": 1e-6,  # ||K*L - 1||_inf, deconvolved L
    "monotone_slack_rel": 1e-10,  # slack on monotonicity / [0, 1] range, times max(1, |.|)
    "admissibility_rel": 1e-9,  # condition (7) noise floor, times max(1, ||g0||_inf)
    "riccati_residual_rel": 1e-5,  # a-posteriori corrector residual, times max(1, ||psi2||)
    "gamma_fit_slack": 0.1,  # fitted Hoelder slope may undershoot gamma by this much
    "holder_slack": 0.1,  # curve Hoelder diagnostic slack on gamma / 2
    "inversion_cutoff": 1e-12,  # Fourier integrand magnitude at which to truncate
}


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_j = j * dt`` for ``j = 0..n_steps``."""

    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @classmethod
    def from_horizon(cls, T: float, n_steps: int) -> "TimeGrid":
        return cls(T / n_steps, int(n_steps))

    @property
    def T(self) -> float:
        return self.dt * self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.dt / factor, self.n_steps * factor)

    def extend(self, n_steps: int) -> "TimeGrid":
        """Same step, different number of steps."""
        return TimeGrid(self.dt, n_steps)

    def index(self, t: float) -> int:
        """Index of grid node ``t``; raises if ``t`` is not on the grid."""
        j = int(round(t / self.dt))
        if abs(j * self.dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= j <= self.n_steps:
            raise ValueError(f"t={t} is not a node of {self}")
        return j

    def shift_ladder(self, h_max: float | None = None) -> list[float]:
        """Dyadic shift ladder ``dt, 2 dt, 4 dt, ...`` up to ``h_max`` (default T)."""
        h_max = self.T if h_max is None else h_max
        out, m = [], 1
        while m * self.dt <= h_max * (1 + 1e-12):
            out.append(m * self.dt)
            m *= 2
        return out
