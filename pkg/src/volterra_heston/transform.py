"""Fourier-Laplace transforms of (log S, V), the forward-curve characteristic
functional, and Fourier pricing of European options (zero rates)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .curves import InputCurve, forward_variance
from .errors import DomainError, NumericalFailure
from .grid import TOLERANCES, TimeGrid
from .kernels import Kernel
from .riccati import (FLArgument, ModelParams, RiccatiSolution, TestFunction, solve_chi2, solve_psi2, solve_xi,
                      xi_nonlinearity)


@dataclass(frozen=True)
class TransformValue:
    """``value = exp(log_s_part + curve_part + integral_part)``."""

    value: complex | np.ndarray
    log_s_part: complex | np.ndarray
    curve_part: complex | np.ndarray
    integral_part: complex | np.ndarray

    @property
    def exponent(self):
        return self.log_s_part + self.curve_part + self.integral_part


def _trapezoid_weights(n: int, dt: float) -> np.ndarray:
    w = np.full(n + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _assemble(sol: RiccatiSolution, arg: FLArgument, log_s, g_vals: np.ndarray, grid: TimeGrid) -> TransformValue:
    """Combine a Riccati solution with curve values ``g`` on the grid.

    ``g_vals`` has shape ``(N+1,)`` or ``(paths, N+1)``; the transform batch
    axis (if any) comes last in the result.
    """
    n = grid.n_steps
    w = _trapezoid_weights(n, grid.dt)
    psi1_T = sol.psi1[-1]
    g_vals = np.asarray(g_vals, dtype=float)
    g_rev = g_vals[..., ::-1]  # g(T - s_j)
    weighted = g_rev * w
    # sum_j w_j g(T - s_j) F(s_j)
    integral = np.tensordot(weighted, sol.F, axes=([-1], [0]))
    u2 = np.broadcast_to(np.asarray(arg.u2, dtype=complex), np.shape(psi1_T))
    curve = np.multiply.outer(g_vals[..., -1], u2)
    log_part = np.multiply.outer(np.asarray(log_s, dtype=float), psi1_T)
    if np.ndim(log_s) == 0 and g_vals.ndim > 1:
        log_part = np.broadcast_to(log_part, curve.shape)
    total = log_part + curve + integral
    return TransformValue(np.exp(total), log_part, curve, integral)


def fourier_laplace(params: ModelParams, k: Kernel, g0: InputCurve, arg: FLArgument, grid: TimeGrid,
                    scheme: str = "predictor_corrector", enforce_constraints: bool = True) -> TransformValue:
    """``E[exp(u1 X_T + u2 V_T + (f1 * X)_T + (f2 * V)_T)]`` with ``T = grid.T``.

    ``X = log S``.  The last integral is done by the trapezoid rule against
    ``g0(T - s)``.
    """
    sol = solve_psi2(k, arg, params, grid, scheme=scheme, enforce_constraints=enforce_constraints)
    return _assemble(sol, arg, math.log(params.s0), g0.on_grid(grid), grid)


def characteristic_function(params: ModelParams, k: Kernel, g0: InputCurve, z, grid: TimeGrid, **kw):
    """``E[exp(i z log S_T)]`` for an array of real ``z``."""
    return fourier_laplace(params, k, g0, FLArgument.characteristic(z), grid, **kw).value


def lift_characteristic_function(params: ModelParams, dm, g0: InputCurve, z, grid: TimeGrid):
    """``E[exp(i z log S_T)]`` under the finite-factor kernel of ``dm``, with zero initial factors."""
    arg = FLArgument.characteristic(z)
    sol = solve_chi2(dm, arg, params, grid)
    return _assemble(sol, arg, math.log(params.s0), g0.on_grid(grid), grid).value


def conditional_transform(params: ModelParams, k: Kernel, g_t, log_s_t, arg: FLArgument, grid: TimeGrid,
                          scheme: str = "predictor_corrector") -> TransformValue:
    """Transform at a future time ``t`` given ``(S_t, g_t)``, horizon ``grid.T = T - t``.

    ``g_t`` is an :class:`InputCurve` or an array of curve values on
    ``grid`` of shape ``(N+1,)`` or ``(paths, N+1)``; ``log_s_t`` is a scalar
    or one value per path.  The Riccati solution is shared by all paths.
    """
    sol = solve_psi2(k, arg, params, grid, scheme=scheme)
    g_vals = g_t.on_grid(grid) if isinstance(g_t, InputCurve) else np.asarray(g_t, dtype=float)
    return _assemble(sol, arg, log_s_t, g_vals, grid)


# --------------------------------------------------------------------------
# Forward-curve characteristic functional
# --------------------------------------------------------------------------


def log_char_functional_g(h_test: TestFunction, g0: InputCurve, params: ModelParams, k: Kernel,
                          grid: TimeGrid) -> complex:
    """``<H_t, g0>`` with ``t = grid.T``."""
    t = grid.T
    transport = 1j * h_test.pair(g0, shift=t)
    sol = solve_xi(h_test, k, params, grid)
    G = xi_nonlinearity(sol.xi, params)
    g_rev = g0.on_grid(grid)[::-1]
    return transport + complex(np.sum(_trapezoid_weights(grid.n_steps, grid.dt) * G * g_rev))


def char_functional_g(h_test: TestFunction, g0: InputCurve, params: ModelParams, k: Kernel, grid: TimeGrid) -> complex:
    """``E[exp(i <g_t, h>)]`` at ``t = grid.T``."""
    return complex(np.exp(log_char_functional_g(h_test, g0, params, k, grid)))


# --------------------------------------------------------------------------
# Pricing
# --------------------------------------------------------------------------


def black_scholes_call(s0: float, strike, T: float, sigma):
    """Zero-rate Black-Scholes call."""
    strike = np.asarray(strike, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    sd = sigma * math.sqrt(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(s0 / strike) + 0.5 * sd**2) / sd
    d2 = d1 - sd
    out = s0 * stats.norm.cdf(d1) - strike * stats.norm.cdf(d2)
    return np.where(sd > 0, out, np.maximum(s0 - strike, 0.0))


def implied_vol(price: float, s0: float, strike: float, T: float) -> float:
    """Black-Scholes implied volatility by bracketed root finding (nan outside no-arbitrage bounds)."""
    lower = max(s0 - strike, 0.0)
    if not lower < price < s0:
        return float("nan")
    return optimize.brentq(lambda s: float(black_scholes_call(s0, strike, T, s)) - price, 1e-8, 10.0,
                           xtol=1e-14, rtol=1e-14, maxiter=200)


@dataclass(frozen=True)
class PriceResult:
    strikes: np.ndarray
    price: np.ndarray
    implied_vol: np.ndarray
    kind: str
    damping: float
    u_max: float
    n_nodes: int
    meta: dict = field(default_factory=dict)


_GL16 = np.polynomial.legendre.leggauss(16)


def _panels(u_lo: float, u_hi: float, n_panels: int):
    edges = np.linspace(u_lo, u_hi, n_panels + 1)
    x, w = _GL16
    nodes = (0.5 * (edges[1:, None] - edges[:-1, None]) * x + 0.5 * (edges[1:, None] + edges[:-1, None])).ravel()
    weights = (0.5 * (edges[1:, None] - edges[:-1, None]) * w).ravel()
    return nodes, weights


def _min_payoff_transform(xi, strikes):
    """Fourier transform of ``x -> min(e^x, K)`` along ``Im xi`` in (0, 1)."""
    strikes = np.asarray(strikes, dtype=float)[:, None]
    return -np.exp((1 + 1j * xi[None, :]) * np.log(strikes)) / (1j * xi[None, :] * (1 + 1j * xi[None, :]))


def option_prices(params: ModelParams, k: Kernel, g0: InputCurve, strikes, grid: TimeGrid, kind: str = "call",
                  damping: float = 0.75, panel_width: float = 2.5, u_max: float = 2000.0,
                  scheme: str = "predictor_corrector") -> PriceResult:
    """European call or put prices by Fourier inversion along ``Im xi = damping``.

    ``E[min(S_T, K)] = (1/pi) int_0^inf Re[w(u + i a) E[exp((a - i u) log S_T)]] du``;
    call = S0 - that, put = K - that.  ``u1 = a - i u`` keeps ``Re psi1 = a``
    inside the unit interval, so the constraints hold on the whole contour.
    Gauss-Legendre panels are added until the integrand drops below the
    inversion cutoff on a whole panel.  The payoff transform has poles at
    distance ``damping`` and ``1 - damping`` from the contour, so the first
    panels are narrowed to resolve them.
    """
    if not 0 < damping < 1:
        raise DomainError(f"damping must lie in (0, 1), got {damping}; the contour Re psi1 = damping "
                          f"must stay inside [0, 1]")
    if kind not in ("call", "put"):
        raise ValueError("kind must be 'call' or 'put'")
    strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
    if np.any(strikes <= 0):
        raise DomainError("strikes must be positive")
    g_vals = g0.on_grid(grid)
    cutoff = TOLERANCES["inversion_cutoff"]
    total = np.zeros(strikes.size)
    u_lo, n_nodes = 0.0, 0
    batch_panels = 4
    width = min(panel_width, 4.0 * min(damping, 1.0 - damping))
    while True:
        u_hi = u_lo + batch_panels * width
        nodes, weights = _panels(u_lo, u_hi, batch_panels)
        arg = FLArgument(u1=damping - 1j * nodes)
        sol = solve_psi2(k, arg, params, grid, scheme=scheme)
        phi = _assemble(sol, arg, math.log(params.s0), g_vals, grid).value
        integrand = np.real(_min_payoff_transform(nodes + 1j * damping, strikes) * phi[None, :])
        if not np.all(np.isfinite(integrand)):
            raise NumericalFailure("non-finite Fourier integrand; try another damping", None)
        total += integrand @ weights
        n_nodes += nodes.size
        u_lo = u_hi
        tail = np.max(np.abs(integrand[:, -16 * 2:]))
        if tail < cutoff:
            break
        if u_lo >= u_max:
            raise NumericalFailure(f"Fourier integral not converged by u = {u_max}; integrand {tail:.2e}. "
                                   f"Try a different damping (current {damping}).", float(tail))
        batch_panels = min(2 * batch_panels, 64)
        width = panel_width
    expected_min = total / math.pi
    price = (params.s0 if kind == "call" else strikes) - expected_min
    T = grid.T
    if kind == "call":
        ivs = np.array([implied_vol(p, params.s0, K, T) for p, K in zip(price, strikes)])
    else:
        ivs = np.array([implied_vol(p + params.s0 - K, params.s0, K, T) for p, K in zip(price, strikes)])
    return PriceResult(strikes, price, ivs, kind, damping, u_lo, n_nodes)


def call_price(params: ModelParams, k: Kernel, g0: InputCurve, strikes, grid: TimeGrid, damping: float = 0.75,
               **kw) -> PriceResult:
    return option_prices(params, k, g0, strikes, grid, "call", damping, **kw)


def put_price(params: ModelParams, k: Kernel, g0: InputCurve, strikes, grid: TimeGrid, damping: float = 0.75,
              **kw) -> PriceResult:
    return option_prices(params, k, g0, strikes, grid, "put", damping, **kw)


def effective_variance(g0: InputCurve, lam: float, k: Kernel, grid: TimeGrid) -> float:
    """``(1/T) int_0^T E[V_t] dt`` by the trapezoid rule."""
    ev = forward_variance(g0, lam, k, grid)
    return float(np.sum(_trapezoid_weights(grid.n_steps, grid.dt) * ev) / grid.T)
