"""Volterra-Euler simulation of (log S, V), pathwise forward curves and Monte Carlo statistics."""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .curves import AdmissibilityChecker, InputCurve, Tabulated
from .errors import DomainError
from .grid import TimeGrid
from .kernels import Kernel
from .riccati import ModelParams, TestFunction

MAGIC = b"VHPS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQd")
BLOCK_SIZE = 256  # paths per work unit; fixed so results never depend on the thread count


@numba.njit(cache=True, nogil=True)
def _volterra_value(g_val, wbar, incr, n_hist, target):
    """``g_val + sum_{l < n_hist} wbar[target - l - 1] * incr[l]``, summed in increasing ``l``."""
    acc = 0.0
    for l in range(n_hist):
        acc += wbar[target - l - 1] * incr[l]
    return g_val + acc


@numba.njit(cache=True, nogil=True)
def _increment(v, dw, lam, nu, dt):
    return -lam * v * dt + nu * math.sqrt(max(v, 0.0)) * dw


@numba.njit(cache=True, nogil=True)
def _simulate_block(g, wbar, z_w, z_perp, lam, nu, rho, dt, log_s0, V, X, dW):
    n_paths, n = z_w.shape
    sq = math.sqrt(dt)
    rho_bar = math.sqrt(max(1.0 - rho * rho, 0.0))
    incr = np.empty(n)
    negatives = 0
    for p in range(n_paths):
        V[p, 0] = g[0]
        X[p, 0] = log_s0
        for j in range(n):
            v = V[p, j]
            if v < 0.0:
                negatives += 1
            vp = max(v, 0.0)
            dw = sq * z_w[p, j]
            dW[p, j] = dw
            incr[j] = _increment(v, dw, lam, nu, dt)
            X[p, j + 1] = X[p, j] - 0.5 * vp * dt + math.sqrt(vp) * (rho * dw + rho_bar * sq * z_perp[p, j])
            V[p, j + 1] = _volterra_value(g[j + 1], wbar, incr, j + 1, j + 1)
        if V[p, n] < 0.0:
            negatives += 1
    return negatives


@numba.njit(cache=True, nogil=True)
def _evolve_block(g_ext, wbar, V, dW, lam, nu, dt, n0, n_out, out):
    n_paths = V.shape[0]
    incr = np.empty(max(n0, 1))
    for p in range(n_paths):
        for l in range(n0):
            incr[l] = _increment(V[p, l], dW[p, l], lam, nu, dt)
        for m in range(n_out + 1):
            out[p, m] = _volterra_value(g_ext[n0 + m], wbar, incr, n0, n0 + m)


def path_normals(seed: int, path_index: int, n_steps: int) -> np.ndarray:
    """Standard normals ``(2, n_steps)`` for one path: its own Philox stream keyed by ``seed``."""
    bits = np.random.Philox(key=seed, counter=[0, 0, path_index, 0])
    return np.random.Generator(bits).standard_normal((2, n_steps))


def _kernel_weights(k: Kernel, grid: TimeGrid, n: int) -> np.ndarray:
    """``W_m = (1/dt) int_{(m-1)dt}^{m dt} K`` for ``m = 1..n``, stored at index ``m - 1``."""
    return k.cell_integrals(grid.dt, n) / grid.dt


@dataclass(frozen=True)
class PathSet:
    """Simulated paths.  ``V`` is stored before the positive-part map."""

    grid: TimeGrid
    V: np.ndarray
    log_s: np.ndarray
    dW: np.ndarray | None
    seed: int
    truncation_fraction: float
    params: ModelParams | None = None
    kernel: Kernel | None = None
    g_grid: np.ndarray | None = None  # input curve on the grid, as used by the scheme
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.V.shape[0]

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, self.n_paths, self.grid.n_steps, self.grid.dt)
        body = np.ascontiguousarray(self.V, dtype="<f8").tobytes() + np.ascontiguousarray(self.log_s, "<f8").tobytes()
        return header + body

    def write_binary(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "PathSet":
        magic, version, n_paths, n_steps, dt = _HEADER.unpack_from(data)
        if magic != MAGIC or version != FORMAT_VERSION:
            raise ValueError(f"not a version-{FORMAT_VERSION} path file")
        size = n_paths * (n_steps + 1)
        arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=2 * size)
        V = arr[:size].reshape(n_paths, n_steps + 1).astype(float)
        log_s = arr[size:].reshape(n_paths, n_steps + 1).astype(float)
        return cls(TimeGrid(dt, n_steps), V, log_s, None, -1, float(np.mean(V < 0)))

    @classmethod
    def read_binary(cls, path) -> "PathSet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def summary_rows(self) -> list[tuple]:
        """Per time node: ``t, mean V, sd V, mean S, sd S, fraction V < 0``."""
        S = np.exp(self.log_s)
        rows = []
        for j, t in enumerate(self.grid.times):
            v = self.V[:, j]
            rows.append((t, v.mean(), v.std(), S[:, j].mean(), S[:, j].std(), float(np.mean(v < 0))))
        return rows


def simulate(params: ModelParams, g0: InputCurve, k: Kernel, grid: TimeGrid, n_paths: int, seed: int,
             threads: int = 1, store_increments: bool = False) -> PathSet:
    """Truncated Volterra-Euler scheme.

    ``V_{j} = g0(t_j) + sum_{l<j} W_{j-l} (-lam V_l dt + nu sqrt(V_l^+) dW_l)`` with
    ``W_m`` the cell average of ``K`` over ``[(m-1)dt, m dt]``; ``log S`` by
    log-Euler with ``V^+``.  Path ``i`` draws from its own counter-based stream,
    so the output is identical for any ``threads``.
    """
    if n_paths < 1:
        raise DomainError("n_paths must be >= 1")
    if threads < 1:
        raise DomainError("threads must be >= 1")
    n = grid.n_steps
    g = np.ascontiguousarray(g0.on_grid(grid), dtype=float)
    wbar = _kernel_weights(k, grid, n)
    V = np.empty((n_paths, n + 1))
    X = np.empty((n_paths, n + 1))
    dW = np.empty((n_paths, n)) if store_increments else None
    log_s0 = math.log(params.s0)

    def run(start: int) -> int:
        stop = min(start + BLOCK_SIZE, n_paths)
        z = np.stack([path_normals(seed, i, n) for i in range(start, stop)])
        block_dW = dW[start:stop] if store_increments else np.empty((stop - start, n))
        return _simulate_block(g, wbar, np.ascontiguousarray(z[:, 0]), np.ascontiguousarray(z[:, 1]), params.lam,
                               params.nu, params.rho, grid.dt, log_s0, V[start:stop], X[start:stop], block_dW)

    starts = range(0, n_paths, BLOCK_SIZE)
    if threads == 1:
        negatives = sum(map(run, starts))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            negatives = sum(pool.map(run, starts))
    return PathSet(grid, V, X, dW, seed, negatives / V.size, params, k, g,
                   {"scheme": "volterra-euler", "block_size": BLOCK_SIZE})


def _require_increments(ps: PathSet) -> None:
    if ps.dW is None or ps.params is None or ps.kernel is None:
        raise ValueError("the path set carries no Brownian increments; simulate with store_increments=True")


def evolve_forward_curves(ps: PathSet, t0: float, g0: InputCurve, n_out: int | None = None,
                          paths=None) -> np.ndarray:
    """Pathwise ``g_{t0}`` on ``t_m = m dt``, ``m = 0..n_out`` (default up to ``T - t0``).

    ``g_{t0}(t) = g0(t0 + t) + sum_{l < n0} W(t + t0 - t_l) (-lam V_l dt + nu sqrt(V_l^+) dW_l)``
    with the same cell weights as the scheme, so ``g_{t0}(0)`` reproduces
    ``V_{t0}`` bit for bit.  ``n_out`` may exceed the simulated horizon: the
    curve only needs the path up to ``t0``.
    """
    _require_increments(ps)
    grid = ps.grid
    n0 = grid.index(t0)
    n_out = grid.n_steps - n0 if n_out is None else int(n_out)
    ext = grid.extend(max(n0 + n_out, grid.n_steps))
    g_ext = g0.on_grid(ext)
    if ps.g_grid is not None:
        g_ext[: grid.n_steps + 1] = ps.g_grid
    wbar = _kernel_weights(ps.kernel, grid, ext.n_steps)
    idx = np.arange(ps.n_paths) if paths is None else np.atleast_1d(paths)
    V = np.ascontiguousarray(ps.V[idx])
    dW = np.ascontiguousarray(ps.dW[idx])
    out = np.empty((idx.size, n_out + 1))
    _evolve_block(g_ext, wbar, V, dW, ps.params.lam, ps.params.nu, grid.dt, n0, n_out, out)
    return out


def evolve_forward_curve(ps: PathSet, path_index: int, t0: float, g0: InputCurve, n_out: int | None = None) -> Tabulated:
    """``g_{t0}`` of one path as a tabulated curve."""
    vals = evolve_forward_curves(ps, t0, g0, n_out, paths=[path_index])[0]
    return Tabulated(ps.grid.dt * np.arange(vals.size), vals)


@dataclass(frozen=True)
class AdmissibilityFraction:
    fraction: float
    n_passed: int
    n_paths: int
    worst: float
    tolerance: float


def empirical_admissibility(ps: PathSet, t0: float, g0: InputCurve, k: Kernel | None = None, ladder=None,
                            tol_rel: float = 1e-6) -> AdmissibilityFraction:
    """Share of paths whose ``g_{t0}`` passes the admissibility check on ``[0, T - t0]``.

    The tolerance is ``tol_rel * max(1, max |g0|)`` for every path.
    """
    k = ps.kernel if k is None else k
    grid = ps.grid
    n0 = grid.index(t0)
    sub = TimeGrid(grid.dt, grid.n_steps - n0)
    checker = AdmissibilityChecker(k, sub, ladder)
    curves = evolve_forward_curves(ps, t0, g0, checker.extended.n_steps)
    tol = tol_rel * max(1.0, float(np.max(np.abs(ps.g_grid if ps.g_grid is not None else g0.on_grid(grid)))))
    worst, passed = math.inf, 0
    for row in curves:
        rep = checker.check(g_values=row, tol=tol, max_reported=0)
        passed += rep.passed
        worst = min(worst, rep.worst_violation)
    return AdmissibilityFraction(passed / ps.n_paths, passed, ps.n_paths, worst, tol)


def pair_curves(curves: np.ndarray, h: TestFunction, dt: float) -> np.ndarray:
    """``int h(y) g(y) dy`` per row by the trapezoid rule on the curve grid."""
    y = dt * np.arange(curves.shape[1])
    w = np.full(y.size, dt)
    w[0] = w[-1] = 0.5 * dt
    return curves @ (w * h(y))


@dataclass(frozen=True)
class MCStats:
    mean: complex | float
    stderr: float
    ci95: tuple
    n: int


def _functional_samples(ps: PathSet, spec) -> np.ndarray:
    if callable(spec):
        return np.asarray(spec(ps))
    kind = spec["kind"]
    if kind == "constant":
        return np.full(ps.n_paths, float(spec.get("value", 1.0)))
    if kind == "terminal_v":
        return ps.V[:, -1]
    if kind == "terminal_s":
        return np.exp(ps.log_s[:, -1])
    if kind == "v_moment":
        return np.maximum(ps.V[:, -1], 0.0) ** spec["p"]
    if kind == "charfn":
        return np.exp(1j * spec["z"] * ps.log_s[:, -1])
    if kind == "call":
        return np.maximum(np.exp(ps.log_s[:, -1]) - spec["strike"], 0.0)
    if kind == "put":
        return np.maximum(spec["strike"] - np.exp(ps.log_s[:, -1]), 0.0)
    raise ValueError(f"unknown functional kind {kind!r}")


def sample_stats(x: np.ndarray, control: np.ndarray | None = None, control_mean: float | None = None) -> MCStats:
    """Mean, standard error and 95% interval of samples (complex allowed).

    With ``control`` (samples with known mean ``control_mean``) the estimate
    uses the regression control variate.  The standard error of a complex
    mean is ``sqrt((var Re + var Im) / n)``.
    """
    x = np.asarray(x)
    n = x.size
    if control is not None:
        c = np.asarray(control, dtype=float) - control_mean
        var_c = float(np.var(c))
        beta = np.mean((x - x.mean()) * c) / var_c if var_c > 0 else 0.0
        x = x - beta * c
    mean = x.mean()
    var = float(np.var(x.real, ddof=1) + (np.var(x.imag, ddof=1) if np.iscomplexobj(x) else 0.0)) if n > 1 else 0.0
    se = math.sqrt(var / n)
    mean = complex(mean) if np.iscomplexobj(x) else float(mean)
    return MCStats(mean, se, (mean - 1.96 * se, mean + 1.96 * se), n)


def mc_stats(ps: PathSet, functional: dict | Callable, control: dict | Callable | None = None,
             control_mean: float | None = None) -> MCStats:
    """Statistics of a functional of the paths.

    ``functional`` is a callable ``PathSet -> samples`` or a dict with
    ``kind`` in ``constant, terminal_v, terminal_s, v_moment (p), charfn (z),
    call (strike), put (strike)``.
    """
    ctrl = None if control is None else _functional_samples(ps, control)
    return sample_stats(_functional_samples(ps, functional), ctrl, control_mean)
