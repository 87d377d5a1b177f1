"""Input curves ``g0``, the admissibility check, and the forward-variance map."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import DomainError
from .grid import TOLERANCES, TimeGrid
from .kernels import (
    Kernel,
    ProductWeights,
    conv_kernel_fun,
    ShiftedResolvent,
    resolvent_first_kind,
    shifted_resolvent_conv,
)


class InputCurve:
    """A curve ``t -> g0(t)`` on ``[0, inf)``."""

    def __call__(self, t):
        raise NotImplementedError

    def on_grid(self, grid: TimeGrid) -> np.ndarray:
        """Values at every node of ``grid``."""
        return np.asarray(self(grid.times), dtype=float)


@dataclass(frozen=True)
class Tabulated(InputCurve):
    """Piecewise-linear through ``(times, values)``, flat outside the table."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size == 0:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if t[0] < 0:
            raise DomainError("curve times must be >= 0")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise DomainError("curve evaluated at negative time")
        return np.interp(t, self.times, self.values)

    @classmethod
    def on(cls, grid: TimeGrid, values) -> "Tabulated":
        return cls(grid.times, np.asarray(values, dtype=float))

    @classmethod
    def from_csv(cls, path) -> "Tabulated":
        """Two columns ``t,value`` with a header row."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise ValueError(f"{path}: expected a header and at least one row")
        try:
            data = np.array([[float(a), float(b)] for a, b, *_ in rows[1:] if a.strip()])
        except ValueError as exc:
            raise ValueError(f"{path}: non-numeric entry ({exc})") from None
        return cls(data[:, 0], data[:, 1])


@dataclass(frozen=True)
class ThetaForm(InputCurve):
    """``g0(t) = V0 + int_0^t K(t - s) theta(s) ds``.

    ``theta`` is a constant or a :class:`Tabulated` curve.  Construction
    checks that ``theta(s) ds + V0 L(ds)`` is a nonnegative measure.
    """

    V0: float
    theta: float | Tabulated
    kernel: Kernel
    check_grid: TimeGrid | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.V0 >= 0:
            raise DomainError(f"V0 must be >= 0, got {self.V0}")
        if isinstance(self.theta, Tabulated):
            if np.any(self.theta.values < 0):
                self._check_measure()
        elif not float(self.theta) >= 0:
            self._check_measure()

    def _check_measure(self):
        grid = self.check_grid
        if grid is None:
            horizon = self.theta.times[-1] if isinstance(self.theta, Tabulated) and self.theta.times[-1] > 0 else 1.0
            grid = TimeGrid.from_horizon(horizon, 1000)
        L = resolvent_first_kind(self.kernel, grid, check=False)
        edges = grid.times
        theta_mass = np.array([self._theta_integral(a, b) for a, b in zip(edges[:-1], edges[1:])])
        total = theta_mass + self.V0 * L.cell_mass
        if self.V0 * L.atom0 < 0 or np.any(total < -1e-12):
            raise DomainError("theta(s) ds + V0 L(ds) is not a nonnegative measure")

    def _theta_integral(self, a, b):
        if isinstance(self.theta, Tabulated):
            return integrate.quad(self.theta, a, b)[0]
        return float(self.theta) * (b - a)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise DomainError("curve evaluated at negative time")
        if not isinstance(self.theta, Tabulated):
            return self.V0 + float(self.theta) * self.kernel.integral(np.zeros_like(t), t)
        flat = np.atleast_1d(t)
        out = np.array([self._conv_at(x) for x in flat])
        return out.reshape(t.shape) if t.ndim else float(out[0])

    def _conv_at(self, t: float) -> float:
        if t == 0:
            return self.V0
        # integrate in the lag u = t - s so the kernel singularity sits at u = 0,
        # splitting at the kinks of the tabulated theta
        k = self.kernel
        lags = sorted({t - p for p in self.theta.times if 0 < p < t})
        edges = [0.0] + lags + [t]
        total = self.V0
        for a, b in zip(edges[:-1], edges[1:]):
            if a == 0.0:
                total += integrate.quad(lambda u: k.regular(u) * self.theta(t - u), 0.0, b, weight="alg",
                                        wvar=(k.sing_exponent, 0.0), epsabs=1e-15, epsrel=1e-12)[0]
            else:
                total += integrate.quad(lambda u: k(u) * self.theta(t - u), a, b, epsabs=1e-15, epsrel=1e-12)[0]
        return total

    def on_grid(self, grid: TimeGrid) -> np.ndarray:
        if not isinstance(self.theta, Tabulated):
            return self(grid.times)
        return self.V0 + conv_kernel_fun(self.kernel, self.theta(grid.times), grid).real


@dataclass(frozen=True)
class ShiftedCurve(InputCurve):
    """``t -> base(t0 + t)``."""

    base: InputCurve
    t0: float

    def __call__(self, t):
        return self.base(self.t0 + np.asarray(t, dtype=float))

    def on_grid(self, grid: TimeGrid) -> np.ndarray:
        j0 = self.t0 / grid.dt
        if abs(j0 - round(j0)) < 1e-9:
            j0 = int(round(j0))
            full = self.base.on_grid(grid.extend(grid.n_steps + j0))
            return full[j0:]
        return np.asarray(self(grid.times), dtype=float)


def make_classical_curve(V0: float, theta_const: float, lam: float, k: Kernel) -> ThetaForm:
    """``g0(t) = V0 + lam * theta * int_0^t K(s) ds``."""
    if V0 < 0 or theta_const < 0 or lam < 0:
        raise DomainError("V0, theta and lambda must be nonnegative")
    return ThetaForm(float(V0), float(lam * theta_const), k)


def shift_curve(g0: InputCurve, t0: float, grid: TimeGrid | None = None) -> InputCurve:
    """``t -> g0(t0 + t)``; tabulated on ``grid`` when one is given."""
    if not (np.isfinite(t0) and t0 >= 0):
        raise DomainError(f"shift t0 must be finite and >= 0, got {t0}")
    if t0 == 0 and grid is None:
        return g0
    shifted = ShiftedCurve(g0, float(t0))
    if grid is None:
        return shifted
    return Tabulated.on(grid, shifted.on_grid(grid))


# --------------------------------------------------------------------------
# Admissibility
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdmissibilityReport:
    passed: bool
    worst_violation: float
    violations: list
    tolerance: float
    ladder: list
    g0_at_zero: float
    holder_slope: float
    holder_flag: bool

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "worst_violation": self.worst_violation,
            "violations": [list(v) for v in self.violations],
            "tolerance": self.tolerance,
            "ladder": list(self.ladder),
            "g0_at_zero": self.g0_at_zero,
            "holder_slope": self.holder_slope,
            "holder_flag": self.holder_flag,
        }


def admissibility_values(g_ext: np.ndarray, phi: ShiftedResolvent, shift_steps: int) -> np.ndarray:
    """Left side of the admissibility inequality at every node of ``phi``'s grid.

    ``g_ext`` holds the curve on the same step out to at least ``n_steps +
    shift_steps``.  Inside each cell ``g`` is interpolated linearly at the
    ``dPhi`` centre of mass (the cell midpoint when no centroids are known),
    so the weights on ``g`` always form a sub-probability combination.
    """
    m = phi.measure
    n = m.grid.n_steps
    g = g_ext[: n + 1]
    theta = np.full(n, 0.5) if phi.centroid is None else phi.centroid
    near = m.cell_mass * (1.0 - theta)  # weight on g(t_n - t_k)
    far = m.cell_mass * theta  # weight on g(t_n - t_{k+1})
    conv = m.atom0 * g
    conv[1:] += np.convolve(near, g[1:])[:n] + np.convolve(far, g[:-1])[:n]
    return g_ext[shift_steps: shift_steps + n + 1] - conv


def _holder_slope(g: np.ndarray, grid: TimeGrid) -> float:
    lags = [m for m in (2**p for p in range(8)) if m < grid.n_steps // 4]
    incs = np.array([np.max(np.abs(g[m:] - g[:-m])) for m in lags])
    if len(lags) < 2 or np.all(incs <= 1e-15 * max(1.0, np.max(np.abs(g)))):
        return math.inf
    incs = np.maximum(incs, 1e-300)
    return float(np.polyfit(np.log(np.array(lags) * grid.dt), np.log(incs), 1)[0])


class AdmissibilityChecker:
    """Precomputed shifted resolvents for repeated admissibility checks on one grid.

    Building the resolvents dominates the cost, so checking many curves
    (for instance one per simulated path) should reuse a single checker.
    """

    def __init__(self, k: Kernel, grid: TimeGrid, shift_ladder=None):
        self.kernel = k
        self.grid = grid
        self.ladder = grid.shift_ladder() if shift_ladder is None else list(shift_ladder)
        self.steps = [int(round(h / grid.dt)) for h in self.ladder]
        for h, m in zip(self.ladder, self.steps):
            if abs(m * grid.dt - h) > 1e-9 * max(1.0, h):
                raise ValueError(f"shift {h} is not a multiple of the grid step")
        self.extended = grid.extend(grid.n_steps + max(self.steps, default=0))
        L = resolvent_first_kind(k, grid.refine(2))
        self.phis = [shifted_resolvent_conv(k, h, grid, L=L, centroids=True) for h in self.ladder]

    def check(self, g0: InputCurve | None = None, g_values: np.ndarray | None = None, tol: float | None = None,
              max_reported: int = 50) -> AdmissibilityReport:
        """Check ``g0``, or curve values already sampled on ``self.extended``."""
        g_ext = g0.on_grid(self.extended) if g_values is None else np.asarray(g_values, dtype=float)
        if g_ext.shape[0] < self.extended.n_steps + 1:
            raise ValueError(f"need {self.extended.n_steps + 1} curve values, got {g_ext.shape[0]}")
        if tol is None:
            tol = TOLERANCES["admissibility_rel"] * max(1.0, float(np.max(np.abs(g_ext))))
        worst = float(g_ext[0])
        bad = []
        if g_ext[0] < -tol:
            bad.append((0.0, 0.0, float(g_ext[0])))
        for h, m, phi in zip(self.ladder, self.steps, self.phis):
            vals = admissibility_values(g_ext, phi, m)
            worst = min(worst, float(vals.min()))
            for j in np.flatnonzero(vals < -tol)[: max(0, max_reported - len(bad))]:
                bad.append((float(h), float(self.grid.times[j]), float(vals[j])))
        slope = _holder_slope(g_ext[: self.grid.n_steps + 1], self.grid)
        holder_ok = slope >= self.kernel.gamma / 2 - TOLERANCES["holder_slack"]
        return AdmissibilityReport(bool(worst >= -tol), worst, bad, float(tol), self.ladder, float(g_ext[0]), slope,
                                   bool(not holder_ok))


def check_admissible(g0: InputCurve, k: Kernel, grid: TimeGrid, shift_ladder=None, tol: float | None = None,
                     max_reported: int = 50, g_values: np.ndarray | None = None) -> AdmissibilityReport:
    """Evaluate the admissibility inequality over a shift ladder.

    Passes iff ``g0(0) >= -tol`` and every value is ``>= -tol``.  ``tol``
    defaults to ``1e-9 * max(1, max|g0|)``.  ``g_values`` may carry the
    curve already sampled on ``grid.extend(n_steps + max shift)``.
    """
    return AdmissibilityChecker(k, grid, shift_ladder).check(g0, g_values, tol, max_reported)


# --------------------------------------------------------------------------
# Forward variance
# --------------------------------------------------------------------------


def solve_linear_volterra(k: Kernel, g: np.ndarray, lam, grid: TimeGrid) -> np.ndarray:
    """Solve ``u + lam K * u = g`` on the grid with piecewise-linear product integration.

    ``g`` may carry trailing batch axes; ``lam`` may be complex.
    """
    pw = ProductWeights.build(k, grid)
    n = grid.n_steps
    g = np.asarray(g)
    u = np.zeros(g.shape, dtype=np.result_type(g, lam, float))
    u[0] = g[0]
    c = pw.lag_weights()
    B = pw.B
    diag = 1.0 + lam * c[0]
    for j in range(1, n + 1):
        hist = np.tensordot(c[1:j], u[j - 1:0:-1], axes=(0, 0)) + B[j - 1] * u[0]
        u[j] = (g[j] - lam * hist) / diag
    return u


def forward_variance(g0: InputCurve, lam: float, k: Kernel, grid: TimeGrid) -> np.ndarray:
    """``E[V_t]`` on the grid: solves ``u + lam K * u = g0``."""
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    g = g0.on_grid(grid)
    if lam == 0:
        return g
    return solve_linear_volterra(k, g, lam, grid)
