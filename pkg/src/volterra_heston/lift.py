"""Finite Markovian lift: exponential factors driven by one Brownian motion."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import integrate

from .curves import AdmissibilityReport, InputCurve, check_admissible
from .errors import DomainError
from .grid import TimeGrid
from .kernels import ExpSum, Kernel, _phi1
from .montecarlo import BLOCK_SIZE, path_normals
from .riccati import ModelParams


@dataclass(frozen=True)
class DiscretizedMeasure:
    """Atoms ``(nodes, weights)`` of a Laplace measure; ``K_n(t) = sum_i c_i exp(-x_i t)``."""

    nodes: np.ndarray
    weights: np.ndarray
    provenance: str = "atoms"

    def __post_init__(self):
        x = np.asarray(self.nodes, dtype=float)
        c = np.asarray(self.weights, dtype=float)
        if x.ndim != 1 or x.shape != c.shape or x.size == 0:
            raise ValueError("nodes and weights must be non-empty 1-d arrays of equal length")
        if np.any(x < 0) or np.any(c <= 0):
            raise DomainError("nodes must be >= 0 and weights > 0")
        if np.any(np.diff(x) <= 0):
            raise DomainError("nodes must be strictly increasing")
        object.__setattr__(self, "nodes", x)
        object.__setattr__(self, "weights", c)

    @property
    def size(self) -> int:
        return self.nodes.size

    def kernel(self) -> ExpSum:
        return ExpSum(tuple(zip(self.weights.tolist(), self.nodes.tolist())))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-np.multiply.outer(t, self.nodes)) @ self.weights

    def l2_error(self, k: Kernel, t_lo: float, t_hi: float) -> float:
        """``||K_n - K||_{L2[t_lo, t_hi]}`` by adaptive quadrature on a log-spaced partition."""
        edges = np.geomspace(t_lo, t_hi, 30)
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            total += integrate.quad(lambda t: (float(self(t)) - float(k(t))) ** 2, a, b, epsabs=1e-14,
                                    epsrel=1e-10, limit=200)[0]
        return math.sqrt(total)


def discretize_measure(k: Kernel, n: int, T: float = 1.0, dt: float = 1e-3, rule: str = "geometric") -> DiscretizedMeasure:
    """Finite atoms for the Laplace measure of ``k``.

    Atomic measures pass through unchanged.  A power density is cut into
    ``n`` cells: ``[0, 1/T]`` followed by geometric cells up to ``1/dt``
    (measured from the density's left end).  Each atom carries the cell mass
    at the cell's barycentre, both in closed form; mass beyond ``1/dt``
    only affects time scales below the grid step and is dropped.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    if rule != "geometric":
        raise ValueError(f"unknown node rule {rule!r}")
    mu = k.laplace_measure()
    if mu.is_atomic:
        order = np.argsort(mu.atoms_x)
        return DiscretizedMeasure(mu.atoms_x[order], mu.atoms_c[order], "atoms")
    if not 0 < dt < T:
        raise DomainError("need 0 < dt < T")
    if n == 1:
        y = np.array([0.0, 1.0 / dt])
    else:
        y = np.concatenate([[0.0], np.geomspace(1.0 / T, 1.0 / dt, n)])
    lo, hi = mu.shift + y[:-1], mu.shift + y[1:]
    mass = mu.mass(lo, hi)
    nodes = mu.first_moment(lo, hi) / mass
    return DiscretizedMeasure(nodes, mass, f"geometric n={n} on [1/T, 1/dt] = [{1 / T:g}, {1 / dt:g}]")


@dataclass(frozen=True)
class FactorCurve(InputCurve):
    """``g(t) = base(t0 + t) + sum_i c_i exp(-x_i t) U_i``; ``base`` may be None (zero)."""

    dm: DiscretizedMeasure
    U: np.ndarray
    base: InputCurve | None = None
    t0: float = 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        factors = np.exp(-np.multiply.outer(t, self.dm.nodes)) @ (self.dm.weights * np.asarray(self.U, dtype=float))
        return factors if self.base is None else factors + self.base(self.t0 + t)


def check_D_mu(U0, dm: DiscretizedMeasure, grid: TimeGrid, ladder=None, tol: float | None = None,
               base: InputCurve | None = None) -> AdmissibilityReport:
    """Admissibility of ``sum_i c_i U0_i exp(-x_i t)`` (plus ``base``) for the kernel ``K_n``."""
    U0 = np.broadcast_to(np.asarray(U0, dtype=float), dm.nodes.shape)
    return check_admissible(FactorCurve(dm, U0, base), dm.kernel(), grid, shift_ladder=ladder, tol=tol)


def reconstruct_forward_curve(U_t0, g0: InputCurve, dm: DiscretizedMeasure, t0: float) -> FactorCurve:
    """``g_{t0}(t) = g0(t0 + t) + sum_i c_i exp(-x_i t) U_{t0}(x_i)``: O(n) per evaluation."""
    return FactorCurve(dm, np.asarray(U_t0, dtype=float), g0, float(t0))


@numba.njit(cache=True, nogil=True)
def _lift_block(g, x, c, decay, phi1, U0, z_w, z_perp, lam, nu, rho, dt, log_s0, snap_idx, V, X, U_snap, dW):
    n_paths, n = z_w.shape
    m = x.size
    sq = math.sqrt(dt)
    rho_bar = math.sqrt(max(1.0 - rho * rho, 0.0))
    U = np.empty(m)
    negatives = 0
    for p in range(n_paths):
        for i in range(m):
            U[i] = U0[i]
        X[p, 0] = log_s0
        s = 0
        for j in range(n + 1):
            agg = 0.0
            for i in range(m):
                agg += c[i] * U[i]
            v = g[j] + agg
            V[p, j] = v
            while s < snap_idx.size and snap_idx[s] == j:
                for i in range(m):
                    U_snap[s, p, i] = U[i]
                s += 1
            if v < 0.0:
                negatives += 1
            if j == n:
                break
            vp = max(v, 0.0)
            dw = sq * z_w[p, j]
            dW[p, j] = dw
            incr = -lam * v * dt + nu * math.sqrt(vp) * dw
            for i in range(m):
                U[i] = decay[i] * U[i] + phi1[i] * incr
            X[p, j + 1] = X[p, j] - 0.5 * vp * dt + math.sqrt(vp) * (rho * dw + rho_bar * sq * z_perp[p, j])
    return negatives


@dataclass(frozen=True)
class LiftPaths:
    grid: TimeGrid
    V: np.ndarray  # aggregate g0(t) + <1, U_t>, before the positive part
    log_s: np.ndarray
    factors: dict  # time -> (n_paths, n_nodes) factor values
    dW: np.ndarray | None
    truncation_fraction: float
    dm: DiscretizedMeasure
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.V.shape[0]


def simulate_lift(U0, g0: InputCurve, dm: DiscretizedMeasure, params: ModelParams, grid: TimeGrid, n_paths: int,
                  seed: int, threads: int = 1, factor_times=None, store_increments: bool = False,
                  check: bool = False) -> LiftPaths:
    """Exponential-Euler scheme for the factors, one Brownian motion shared by all nodes.

    ``U_i <- exp(-x_i dt) U_i + phi1(x_i dt) (-lam V dt + nu sqrt(V^+) dW)`` with
    ``V = g0(t) + sum_i c_i U_i``.  Path ``i`` uses the same normals as
    :func:`montecarlo.simulate` with the same seed, so for the atoms of an
    ExpSum kernel (and ``U0 = 0``) both schemes produce the same paths up to
    rounding.  ``factor_times`` selects the grid times at which factor values
    are kept (default: the horizon).
    """
    if n_paths < 1 or threads < 1:
        raise DomainError("n_paths and threads must be >= 1")
    U0 = np.ascontiguousarray(np.broadcast_to(np.asarray(U0, dtype=float), dm.nodes.shape))
    if check:
        rep = check_D_mu(U0, dm, grid, base=g0)
        if not rep.passed:
            raise DomainError(f"initial factor state is not admissible (worst value {rep.worst_violation:.3e})")
    n = grid.n_steps
    times = [grid.T] if factor_times is None else list(factor_times)
    snap_idx = np.array(sorted(grid.index(t) for t in times), dtype=np.int64)
    g = np.ascontiguousarray(g0.on_grid(grid), dtype=float)
    decay = np.exp(-dm.nodes * grid.dt)
    phi1 = _phi1(dm.nodes * grid.dt)
    V = np.empty((n_paths, n + 1))
    X = np.empty((n_paths, n + 1))
    snaps = np.empty((snap_idx.size, n_paths, dm.size))
    dW = np.empty((n_paths, n)) if store_increments else None

    def run(start: int) -> int:
        stop = min(start + BLOCK_SIZE, n_paths)
        z = np.stack([path_normals(seed, i, n) for i in range(start, stop)])
        block_dW = dW[start:stop] if store_increments else np.empty((stop - start, n))
        block_snap = np.empty((snap_idx.size, stop - start, dm.size))
        neg = _lift_block(g, dm.nodes, dm.weights, decay, phi1, U0, np.ascontiguousarray(z[:, 0]),
                          np.ascontiguousarray(z[:, 1]), params.lam, params.nu, params.rho, grid.dt,
                          math.log(params.s0), snap_idx, V[start:stop], X[start:stop], block_snap, block_dW)
        snaps[:, start:stop] = block_snap
        return neg

    starts = range(0, n_paths, BLOCK_SIZE)
    if threads == 1:
        negatives = sum(map(run, starts))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            negatives = sum(pool.map(run, starts))
    factors = {float(grid.times[j]): snaps[s] for s, j in enumerate(snap_idx)}
    return LiftPaths(grid, V, X, factors, dW, negatives / V.size, dm, seed, {"scheme": "exponential-euler"})
