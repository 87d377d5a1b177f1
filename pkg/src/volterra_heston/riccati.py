"""Riccati-Volterra equations behind the exponential-affine transforms.

Main system, for a transform argument ``(u1, u2, f1, f2)``::

    psi1 = u1 + int_0^t f1
    psi2 = u2 K + K * F(psi1, psi2)
    F    = f2 + (psi1^2 - psi1) / 2 + (rho nu psi1 - lam) psi2 + nu^2 psi2^2 / 2

All solvers accept a batch of arguments at once (trailing axis) so that a
whole Fourier grid is marched in one pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import BlowupError, DomainError, NumericalFailure
from .grid import TOLERANCES, TimeGrid
from .kernels import Kernel, ProductWeights, _phi1, _phi2


@dataclass(frozen=True)
class ModelParams:
    lam: float
    nu: float
    rho: float
    s0: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.nu < 0:
            raise DomainError("lambda and nu must be >= 0")
        if not -1 <= self.rho <= 1:
            raise DomainError("rho must lie in [-1, 1]")
        if not self.s0 > 0:
            raise DomainError("S0 must be positive")


@dataclass(frozen=True)
class FLArgument:
    """Transform argument.  ``u1``/``u2`` may be arrays (a batch); ``f1``/``f2``
    are grid functions of shape ``(N+1,)`` or ``(N+1, batch)``, ``None`` meaning 0."""

    u1: complex | np.ndarray = 0.0
    u2: complex | np.ndarray = 0.0
    f1: np.ndarray | None = None
    f2: np.ndarray | None = None

    @classmethod
    def characteristic(cls, z) -> "FLArgument":
        """``u = (i z, 0)``: the characteristic function of log S."""
        return cls(u1=1j * np.asarray(z, dtype=complex))

    def batch_shape(self) -> tuple:
        shapes = [np.shape(self.u1), np.shape(self.u2)]
        for f in (self.f1, self.f2):
            if f is not None:
                shapes.append(np.shape(f)[1:])
        return np.broadcast_shapes(*shapes)

    def constraint_flags(self, grid: TimeGrid) -> dict:
        p1 = psi1(self, grid)
        f2 = np.zeros(1) if self.f2 is None else np.asarray(self.f2)
        return {
            "re_psi1_in_unit_interval": bool(np.all((p1.real >= -1e-12) & (p1.real <= 1 + 1e-12))),
            "re_u2_nonpositive": bool(np.all(np.real(self.u2) <= 0)),
            "re_f2_nonpositive": bool(np.all(np.real(f2) <= 0)),
        }

    def valid_constraints(self, grid: TimeGrid) -> bool:
        return all(self.constraint_flags(grid).values())


def psi1(arg: FLArgument, grid: TimeGrid) -> np.ndarray:
    """``u1 + int_0^t f1`` by the trapezoid rule; shape ``(N+1,) + batch``."""
    shape = (grid.n_steps + 1,) + arg.batch_shape()
    out = np.broadcast_to(np.asarray(arg.u1, dtype=complex), shape).copy()
    if arg.f1 is not None:
        f1 = np.asarray(arg.f1, dtype=complex)
        cum = integrate.cumulative_trapezoid(f1, dx=grid.dt, axis=0, initial=0)
        out = out + cum.reshape(cum.shape + (1,) * (len(shape) - cum.ndim))
    return out


def riccati_rhs(psi1_val, psi2_val, f2_val, params: ModelParams):
    """``F(psi1, psi2)`` pointwise."""
    return (f2_val + 0.5 * (psi1_val * psi1_val - psi1_val)
            + (params.rho * params.nu * psi1_val - params.lam) * psi2_val
            + 0.5 * params.nu**2 * psi2_val * psi2_val)


@dataclass(frozen=True)
class RiccatiSolution:
    psi1: np.ndarray
    psi2: np.ndarray
    F: np.ndarray
    grid: TimeGrid
    residual: float
    scheme: str
    iterations: int


def kernel_forcing(k: Kernel, grid: TimeGrid) -> np.ndarray:
    """``K(t_j)`` with the value at 0 replaced by the first-cell average for singular kernels."""
    out = np.empty(grid.n_steps + 1)
    out[1:] = k(grid.times[1:])
    out[0] = k.integral(0.0, grid.dt) / grid.dt if k.singular else k(0.0)
    return out


def _march(pw: ProductWeights, forcing: np.ndarray, rhs: Callable, n_steps: int, dt: float,
           scheme: str = "predictor_corrector", max_iter: int = 50, tol: float = 1e-14,
           drhs: Callable | None = None):
    """March ``x = forcing + K * rhs(x)`` on the grid.

    ``rhs(j, x_j)`` evaluates the nonlinearity at node ``j``.  The history
    part of the convolution uses the exact trapezoid product weights; the
    predictor freezes ``rhs`` over the newest cell.  After the corrector,
    the step's own defect ``A_0 |rhs(x) - rhs_used|`` is measured and, if it
    exceeds a fraction of the residual tolerance, the step equation is
    solved further: by Newton when ``drhs`` (the derivative in ``x``) is
    given, else by repeating the corrector.  This only triggers in the
    first cells of a singular kernel or for large transform arguments.
    ``picard`` iterates the corrector to convergence at every step.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _march_steps(pw, forcing, rhs, n_steps, dt, scheme, max_iter, tol, drhs)


def _march_steps(pw, forcing, rhs, n_steps, dt, scheme, max_iter, tol, drhs):
    c = pw.lag_weights()
    A0, B = pw.A[0], pw.B
    x = np.zeros(forcing.shape, dtype=complex)
    F = np.zeros(forcing.shape, dtype=complex)
    x[0] = forcing[0]
    F[0] = rhs(0, x[0])
    iters = 0
    rel = 0.1 * TOLERANCES["riccati_residual_rel"]
    for n in range(n_steps):
        hist = forcing[n + 1] + np.tensordot(c[1:n + 1], F[n:0:-1], axes=(0, 0)) + B[n] * F[0]
        x_new = hist + A0 * F[n]
        # each batch element is iterated on its own, so batching never changes results
        active = np.ones(np.shape(x_new), dtype=bool)
        for it in range(max_iter):
            F_used = rhs(n + 1, x_new)
            if it > 0 and drhs is not None and scheme != "picard":
                x_next = x_new - (x_new - hist - A0 * F_used) / (1.0 - A0 * drhs(n + 1, x_new))
            else:
                x_next = hist + A0 * F_used
            iters += 1
            delta = np.abs(x_next - x_new)
            x_new = np.where(active, x_next, x_new)
            scale = np.maximum(1.0, np.abs(x_new))
            if scheme == "picard":
                active &= delta > tol * scale
            else:
                active &= np.abs(x_new - hist - A0 * rhs(n + 1, x_new)) > rel * scale
            active &= np.isfinite(x_new)
            if not np.any(active):
                break
        if not np.all(np.isfinite(x_new)):
            raise BlowupError(f"non-finite solution at t={(n + 1) * dt:.6g}", last_valid_time=n * dt)
        x[n + 1] = x_new
        F[n + 1] = rhs(n + 1, x_new)
    return x, F, iters


def _residual(pw: ProductWeights, x, forcing, F) -> float:
    err = x - forcing - pw.conv(F)
    return float(np.max(np.abs(err[1:]))) if err.shape[0] > 1 else 0.0


def _check_residual(resid: float, x) -> None:
    limit = TOLERANCES["riccati_residual_rel"] * max(1.0, float(np.max(np.abs(x))))
    if resid > limit:
        raise NumericalFailure(f"Riccati residual {resid:.3e} above {limit:.3e}", resid)


def solve_psi2(k: Kernel, arg: FLArgument, params: ModelParams, grid: TimeGrid,
               scheme: str = "predictor_corrector", enforce_constraints: bool = True) -> RiccatiSolution:
    """Solve ``psi2 = u2 K + K * F(psi1, psi2)`` on the grid.

    For a singular kernel with ``u2 != 0`` the node-0 value is the average
    of ``u2 K`` over the first cell (``K(0)`` is infinite).
    """
    if scheme not in ("predictor_corrector", "picard"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if enforce_constraints and not arg.valid_constraints(grid):
        raise DomainError(f"transform argument violates the admissibility constraints: "
                          f"{arg.constraint_flags(grid)}")
    p1 = psi1(arg, grid)
    batch = p1.shape[1:]
    f2 = np.zeros(p1.shape, dtype=complex) if arg.f2 is None else np.broadcast_to(
        np.asarray(arg.f2, dtype=complex).reshape(np.shape(arg.f2) + (1,) * (p1.ndim - np.ndim(arg.f2))), p1.shape)
    u2 = np.broadcast_to(np.asarray(arg.u2, dtype=complex), batch)
    forcing = kernel_forcing(k, grid).reshape((-1,) + (1,) * len(batch)) * u2
    pw = ProductWeights.build(k, grid)

    def rhs(j, x):
        return riccati_rhs(p1[j], x, f2[j], params)

    def drhs(j, x):
        return params.rho * params.nu * p1[j] - params.lam + params.nu**2 * x

    x, F, iters = _march(pw, forcing, rhs, grid.n_steps, grid.dt, scheme, drhs=drhs)
    resid = _residual(pw, x, forcing, F)
    _check_residual(resid, x)
    return RiccatiSolution(p1, x, F, grid, resid, scheme, iters)


# --------------------------------------------------------------------------
# Forward-curve functional
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """A test function ``h`` supported in ``[0, support]``."""

    fn: Callable
    support: float

    __test__ = False  # not a pytest class

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        return np.where((y >= 0) & (y <= self.support), self.fn(np.clip(y, 0, self.support)), 0.0)

    @classmethod
    def bump(cls, center: float, width: float, amplitude: float = 1.0) -> "TestFunction":
        """Smooth ``amplitude * exp(-1 / (1 - r^2))``-shaped bump."""
        def fn(y):
            r = (np.asarray(y, dtype=float) - center) / width
            inside = np.abs(r) < 1
            out = np.zeros_like(r)
            out[inside] = amplitude * np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
            return out
        return cls(fn, center + width)

    def pair(self, g: Callable, shift: float = 0.0) -> float:
        """``int h(y) g(shift + y) dy``."""
        return integrate.quad(lambda y: float(self(y)) * float(g(shift + y)), 0.0, self.support,
                              epsabs=1e-14, epsrel=1e-11, limit=200)[0]

    def pair_kernel(self, k: Kernel, t) -> np.ndarray:
        """``int h(y) K(t + y) dy`` for each ``t`` (the singular point is only hit at t = 0)."""
        out = []
        for tj in np.atleast_1d(t):
            if tj == 0 and k.singular:
                val = integrate.quad(lambda y: float(self(y)) * float(k.regular(y)), 0.0, self.support,
                                     weight="alg", wvar=(k.sing_exponent, 0.0), epsabs=1e-14, epsrel=1e-11,
                                     limit=200)[0]
            else:
                val = integrate.quad(lambda y: float(self(y)) * float(k(tj + y)), 0.0, self.support,
                                     epsabs=1e-14, epsrel=1e-11, limit=200)[0]
            out.append(val)
        return np.array(out)


def xi_nonlinearity(xi, params: ModelParams):
    """``-lam xi + nu^2 xi^2 / 2``."""
    return -params.lam * xi + 0.5 * params.nu**2 * xi * xi


@dataclass(frozen=True)
class XiSolution:
    xi: np.ndarray
    forcing: np.ndarray
    G: np.ndarray
    grid: TimeGrid
    residual: float


def solve_xi(h_test: TestFunction, k: Kernel, params: ModelParams, grid: TimeGrid,
             scheme: str = "predictor_corrector") -> XiSolution:
    """``xi(s) = i int h(y) K(s + y) dy + int_0^s K(s - u) G(xi(u)) du``."""
    forcing = 1j * h_test.pair_kernel(k, grid.times)
    pw = ProductWeights.build(k, grid)
    x, G, _ = _march(pw, forcing, lambda j, v: xi_nonlinearity(v, params), grid.n_steps, grid.dt, scheme,
                     drhs=lambda j, v: params.nu**2 * v - params.lam)
    resid = _residual(pw, x, forcing, G)
    _check_residual(resid, x)
    return XiSolution(x, forcing, G, grid, resid)


# --------------------------------------------------------------------------
# Lifted Riccati system
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LiftRiccatiSolution:
    chi2: np.ndarray  # (N+1, n_nodes) + batch
    psi2: np.ndarray
    psi1: np.ndarray
    F: np.ndarray


def solve_chi2(dm, arg: FLArgument, params: ModelParams, grid: TimeGrid,
               enforce_constraints: bool = True) -> LiftRiccatiSolution:
    """Exponential integrator for ``d chi/dt = -x chi + F(psi1, <chi, 1>_mu)``, ``chi(0) = u2``.

    Each step integrates ``F`` exactly as a linear function over the cell
    (exponential trapezoid), with an exponential-Euler predictor.  For the
    atoms of a sum-of-exponentials kernel this is the same recursion as
    :func:`solve_psi2` up to rounding.
    """
    if enforce_constraints and not arg.valid_constraints(grid):
        raise DomainError("transform argument violates the admissibility constraints")
    x = np.asarray(dm.nodes, dtype=float)
    c = np.asarray(dm.weights, dtype=float)
    dt = grid.dt
    p1 = psi1(arg, grid)
    batch = p1.shape[1:]
    f2 = np.zeros(p1.shape, dtype=complex) if arg.f2 is None else np.broadcast_to(
        np.asarray(arg.f2, dtype=complex).reshape(np.shape(arg.f2) + (1,) * (p1.ndim - np.ndim(arg.f2))), p1.shape)
    shape_nodes = (x.size,) + (1,) * len(batch)
    decay = np.exp(-x * dt).reshape(shape_nodes)
    w1 = (dt * _phi1(x * dt)).reshape(shape_nodes)
    w2 = (dt * _phi2(x * dt)).reshape(shape_nodes)
    cw = c.reshape(shape_nodes)
    chi = np.zeros((grid.n_steps + 1, x.size) + batch, dtype=complex)
    psi2 = np.zeros((grid.n_steps + 1,) + batch, dtype=complex)
    F = np.zeros_like(psi2)
    chi[0] = np.broadcast_to(np.asarray(arg.u2, dtype=complex), batch)
    psi2[0] = np.sum(cw * chi[0], axis=0)
    F[0] = riccati_rhs(p1[0], psi2[0], f2[0], params)
    state = chi[0]
    for n in range(grid.n_steps):
        base = decay * state + (w1 - w2) * F[n]
        pred = base + w2 * F[n]
        F_pred = riccati_rhs(p1[n + 1], np.sum(cw * pred, axis=0), f2[n + 1], params)
        chi[n + 1] = base + w2 * F_pred
        if not np.all(np.isfinite(chi[n + 1])):
            raise BlowupError(f"non-finite lifted solution at t={(n + 1) * dt:.6g}", last_valid_time=n * dt)
        psi2[n + 1] = np.sum(cw * chi[n + 1], axis=0)
        F[n + 1] = riccati_rhs(p1[n + 1], psi2[n + 1], f2[n + 1], params)
        # later steps see F re-evaluated at the corrected value (PECE)
        state = chi[n + 1] + w2 * (F[n + 1] - F_pred)
    return LiftRiccatiSolution(chi, psi2, p1, F)
