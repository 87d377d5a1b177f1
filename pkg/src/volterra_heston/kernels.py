"""Convolution kernels, their Laplace measures and resolvents of the first kind.

Three kernel families are supported::

    Fractional   K(t) = c t^(a-1) / Gamma(a)                a in (1/2, 1]
    GammaKernel  K(t) = c exp(-lam t) t^(a-1) / Gamma(a)    a in (1/2, 1), lam >= 0
    ExpSum       K(t) = sum_i c_i exp(-x_i t)               c_i, x_i >= 0

Every convolution against a kernel is done by product integration: the
kernel is integrated exactly over each grid cell (closed-form antiderivatives)
so the t^(a-1) singularity at the origin never has to be sampled.

Measures on the grid (resolvents ``L``, the derivative measures
``d(Delta_h K * L)``) are :class:`GridMeasure` objects: an atom at 0, optional
interior atoms and a mass per grid cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special

from .errors import DomainError, NumericalFailure
from .grid import TOLERANCES, TimeGrid

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


def _phi1(z):
    """(1 - exp(-z)) / z, with the removable singularity at 0 filled in."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    nz = z != 0
    out[nz] = -np.expm1(-z[nz]) / z[nz]
    return out


def _phi2(z):
    """int_0^1 v exp(-z (1 - v)) dv = (z - 1 + exp(-z)) / z^2."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-2
    zs = z[small]
    out[small] = 0.5 - zs / 6 + zs**2 / 24 - zs**3 / 120 + zs**4 / 720
    zb = z[~small]
    out[~small] = (zb + np.expm1(-zb)) / zb**2
    return out


def _psi1(z):
    """int_0^1 v exp(-z v) dv = (1 - exp(-z)(1 + z)) / z^2."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-2
    zs = z[small]
    out[small] = 0.5 - zs / 3 + zs**2 / 8 - zs**3 / 30 + zs**4 / 144
    zb = z[~small]
    out[~small] = (-np.expm1(-zb) - zb * np.exp(-zb)) / zb**2
    return out


# --------------------------------------------------------------------------
# Laplace measures
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LaplaceMeasure:
    """Measure ``mu`` with ``K(t) = int exp(-x t) mu(dx)``.

    Either a finite list of atoms or the power density
    ``c (x - shift)^(-a) / (Gamma(a) Gamma(1 - a))`` on ``(shift, inf)``.
    """

    atoms_x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    atoms_c: np.ndarray = field(default_factory=lambda: np.zeros(0))
    c: float = 0.0
    alpha: float = 0.0
    shift: float = 0.0

    @property
    def is_atomic(self) -> bool:
        return self.c == 0.0

    def _norm(self) -> float:
        return self.c / (math.gamma(self.alpha) * math.gamma(1 - self.alpha))

    def density(self, x):
        x = np.asarray(x, dtype=float)
        if self.is_atomic:
            return np.zeros_like(x)
        y = x - self.shift
        out = np.zeros_like(x)
        pos = y > 0
        out[pos] = self._norm() * y[pos] ** (-self.alpha)
        return out

    def mass(self, lo, hi):
        """mu((lo, hi]) for the density part, closed form."""
        a = self.alpha
        ylo = np.maximum(np.asarray(lo, dtype=float) - self.shift, 0.0)
        yhi = np.maximum(np.asarray(hi, dtype=float) - self.shift, 0.0)
        return self._norm() * (yhi ** (1 - a) - ylo ** (1 - a)) / (1 - a)

    def first_moment(self, lo, hi):
        """int_(lo, hi] x mu(dx) for the density part."""
        a = self.alpha
        ylo = np.maximum(np.asarray(lo, dtype=float) - self.shift, 0.0)
        yhi = np.maximum(np.asarray(hi, dtype=float) - self.shift, 0.0)
        m1 = (yhi ** (2 - a) - ylo ** (2 - a)) / (2 - a)
        return self._norm() * m1 + self.shift * self.mass(lo, hi)

    def laplace(self, t: float) -> float:
        """int exp(-x t) mu(dx) by numerical quadrature (independent of K's formula)."""
        total = float(np.sum(self.atoms_c * np.exp(-self.atoms_x * t)))
        if not self.is_atomic:
            norm = self._norm()
            head, _ = integrate.quad(lambda y: np.exp(-y * t), 0.0, 1.0, weight="alg",
                                     wvar=(-self.alpha, 0.0), epsabs=1e-14, epsrel=1e-12)
            tail, _ = integrate.quad(lambda y: np.exp(-y * t) * y ** (-self.alpha), 1.0, np.inf,
                                     epsabs=1e-14, epsrel=1e-12, limit=200)
            total += norm * math.exp(-self.shift * t) * (head + tail)
        return total


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------


class Kernel:
    """Base class; subclasses are frozen dataclasses."""

    kind: str = ""

    @property
    def gamma(self) -> float:
        raise NotImplementedError

    @property
    def singular(self) -> bool:
        return False

    @property
    def sing_exponent(self) -> float:
        """``e`` such that ``K(t) / t^e`` is bounded near 0."""
        return 0.0

    @property
    def is_constant(self) -> bool:
        return False

    def __call__(self, t):
        raise NotImplementedError

    def regular(self, t):
        """``K(t) / t^sing_exponent``, finite at 0."""
        raise NotImplementedError

    def integral(self, a, b):
        """int_a^b K(s) ds, vectorised, 0 <= a <= b."""
        raise NotImplementedError

    def cell_integrals(self, dt: float, n: int, offset: float = 0.0) -> np.ndarray:
        """int over [offset + k dt, offset + (k+1) dt] for k = 0..n-1."""
        edges = offset + dt * np.arange(n + 1)
        return self.integral(edges[:-1], edges[1:])

    def cell_first_moments(self, dt: float, n: int) -> np.ndarray:
        """int_{k dt}^{(k+1) dt} (s - k dt) K(s) ds for k = 0..n-1."""
        k = np.arange(1, n)
        s = dt * (k[:, None] + _GL_X[None, :])
        rest = dt**2 * (self(s) * _GL_X[None, :]) @ _GL_W
        return np.concatenate([[self._first_moment_cell0(dt)], rest])

    def _first_moment_cell0(self, dt: float) -> float:
        raise NotImplementedError

    def product_moments(self, t, a, b, beta: float):
        """``int_a^b K(t - s) s^beta (s - a)^j ds`` for j = 0, 1 (requires b <= t)."""
        raise NotImplementedError

    def laplace_measure(self) -> LaplaceMeasure:
        raise NotImplementedError

    def to_spec(self) -> dict:
        raise NotImplementedError


def _power_moments(t, a, b, alpha, beta, order=1):
    """int_a^b (t - s)^(alpha - 1) s^(beta + j) ds for j = 0..order via incomplete beta."""
    t = np.asarray(t, dtype=float)
    xa = np.clip(a / t, 0.0, 1.0)
    xb = np.clip(b / t, 0.0, 1.0)
    out = []
    for j in range(order + 1):
        p = beta + j + 1.0
        scale = t ** (alpha + beta + j) * special.beta(p, alpha)
        out.append(scale * (special.betainc(p, alpha, xb) - special.betainc(p, alpha, xa)))
    return out


@dataclass(frozen=True)
class Fractional(Kernel):
    c: float = 1.0
    alpha: float = 0.6
    kind = "fractional"

    def __post_init__(self):
        if not self.c > 0:
            raise DomainError(f"c must be positive, got {self.c}")
        if not 0.5 < self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in (1/2, 1], got {self.alpha}")

    @property
    def gamma(self) -> float:
        return 2 * self.alpha - 1

    @property
    def singular(self) -> bool:
        return self.alpha < 1

    @property
    def sing_exponent(self) -> float:
        return self.alpha - 1

    @property
    def is_constant(self) -> bool:
        return self.alpha == 1

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.singular and np.any(t <= 0):
            raise DomainError("singular kernel evaluated at t <= 0; use cell integrals")
        return self.c * t ** (self.alpha - 1) / math.gamma(self.alpha)

    def regular(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.c / math.gamma(self.alpha))

    def integral(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return self.c * (b**self.alpha - a**self.alpha) / math.gamma(self.alpha + 1)

    def _first_moment_cell0(self, dt):
        return self.c * dt ** (self.alpha + 1) / ((self.alpha + 1) * math.gamma(self.alpha))

    def product_moments(self, t, a, b, beta):
        m0, m1 = _power_moments(t, a, b, self.alpha, beta)
        norm = self.c / math.gamma(self.alpha)
        return norm * m0, norm * (m1 - a * m0)

    def laplace_measure(self):
        if self.is_constant:
            return LaplaceMeasure(atoms_x=np.array([0.0]), atoms_c=np.array([self.c]))
        return LaplaceMeasure(c=self.c, alpha=self.alpha)

    def to_spec(self):
        return {"kind": "fractional", "c": self.c, "alpha": self.alpha}


@dataclass(frozen=True)
class GammaKernel(Kernel):
    c: float = 1.0
    alpha: float = 0.75
    lambda_k: float = 1.0
    kind = "gamma"

    def __post_init__(self):
        if not self.c > 0:
            raise DomainError(f"c must be positive, got {self.c}")
        if not 0.5 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (1/2, 1), got {self.alpha}")
        if not self.lambda_k >= 0:
            raise DomainError(f"lambda_k must be >= 0, got {self.lambda_k}")

    @property
    def gamma(self) -> float:
        return 2 * self.alpha - 1

    @property
    def singular(self) -> bool:
        return True

    @property
    def sing_exponent(self) -> float:
        return self.alpha - 1

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise DomainError("singular kernel evaluated at t <= 0; use cell integrals")
        return self.c * np.exp(-self.lambda_k * t) * t ** (self.alpha - 1) / math.gamma(self.alpha)

    def regular(self, t):
        t = np.asarray(t, dtype=float)
        return self.c * np.exp(-self.lambda_k * t) / math.gamma(self.alpha)

    def integral(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        lam, al = self.lambda_k, self.alpha
        if lam == 0:
            return self.c * (b**al - a**al) / math.gamma(al + 1)
        # difference of upper tails is accurate when both ends are far out
        diff = np.where(lam * a > 1.0,
                        special.gammaincc(al, lam * a) - special.gammaincc(al, lam * b),
                        special.gammainc(al, lam * b) - special.gammainc(al, lam * a))
        return self.c * lam ** (-al) * diff

    def _first_moment_cell0(self, dt):
        lam, al = self.lambda_k, self.alpha
        if lam == 0:
            return self.c * dt ** (al + 1) / ((al + 1) * math.gamma(al))
        return self.c * al * lam ** (-al - 1) * special.gammainc(al + 1, lam * dt)

    def product_moments(self, t, a, b, beta):
        # exp(-lam (t - s)) linearised about the cell midpoint: O(lam^2 dt^2) per cell
        lam = self.lambda_k
        mid = 0.5 * (a + b)
        m0, m1, m2 = _power_moments(t, a, b, self.alpha, beta, order=2)
        norm = self.c / math.gamma(self.alpha) * np.exp(-lam * (t - mid))
        r0 = m0 + lam * (m1 - mid * m0)
        r1 = (m1 - a * m0) + lam * (m2 - (a + mid) * m1 + a * mid * m0)
        return norm * r0, norm * r1

    def laplace_measure(self):
        return LaplaceMeasure(c=self.c, alpha=self.alpha, shift=self.lambda_k)

    def to_spec(self):
        return {"kind": "gamma", "c": self.c, "alpha": self.alpha, "lambda_k": self.lambda_k}


@dataclass(frozen=True)
class ExpSum(Kernel):
    terms: tuple = ((1.0, 0.0),)
    kind = "expsum"

    def __post_init__(self):
        terms = tuple((float(c), float(x)) for c, x in self.terms)
        if not terms:
            raise DomainError("ExpSum needs at least one term")
        if any(c < 0 or x < 0 for c, x in terms):
            raise DomainError("ExpSum weights and rates must be nonnegative")
        if all(c == 0 for c, _ in terms):
            raise DomainError("ExpSum weights cannot all be zero")
        object.__setattr__(self, "terms", terms)

    @property
    def c(self) -> np.ndarray:
        return np.array([c for c, _ in self.terms])

    @property
    def x(self) -> np.ndarray:
        return np.array([x for _, x in self.terms])

    @property
    def gamma(self) -> float:
        return 1.0

    @property
    def is_constant(self) -> bool:
        return all(x == 0 for c, x in self.terms if c > 0)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise DomainError("kernel evaluated at t < 0")
        return np.tensordot(np.exp(-np.multiply.outer(t, self.x)), self.c, axes=([-1], [0]))

    def regular(self, t):
        return self(t)

    def integral(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        width = b - a
        x = self.x
        vals = np.exp(-np.multiply.outer(a, x)) * np.multiply.outer(width, np.ones_like(x)) \
            * _phi1(np.multiply.outer(width, x))
        return vals @ self.c

    def cell_first_moments(self, dt, n):
        k = np.arange(n)
        x = self.x
        vals = np.exp(-np.multiply.outer(k * dt, x)) * dt**2 * _psi1(x * dt)[None, :]
        return vals @ self.c

    def product_moments(self, t, a, b, beta):
        if beta != 0:
            raise ValueError("ExpSum product moments are only needed with beta = 0")
        t, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, a, b)))
        width = (b - a)[..., None]
        x = self.x
        decay = np.exp(-(t - b)[..., None] * x)
        m0 = (decay * width * _phi1(width * x)) @ self.c
        m1 = (decay * width**2 * _phi2(width * x)) @ self.c
        return m0, m1

    def laplace_measure(self):
        return LaplaceMeasure(atoms_x=self.x, atoms_c=self.c)

    def to_spec(self):
        return {"kind": "expsum", "terms": [[c, x] for c, x in self.terms]}


def constant_kernel(c: float = 1.0) -> ExpSum:
    """K == c, the classical Heston kernel."""
    return ExpSum(((c, 0.0),))


def kernel_from_spec(spec: dict) -> Kernel:
    """Build a kernel from ``{"kind": ..., "c": .., "alpha": .., "lambda_k": .., "terms": ..}``."""
    kind = spec.get("kind")
    if kind == "fractional":
        return Fractional(c=spec.get("c", 1.0), alpha=spec["alpha"])
    if kind == "gamma":
        return GammaKernel(c=spec.get("c", 1.0), alpha=spec["alpha"], lambda_k=spec.get("lambda_k", 0.0))
    if kind == "expsum":
        return ExpSum(tuple(tuple(t) for t in spec["terms"]))
    raise DomainError(f"unknown kernel kind {kind!r}")


def kernel_eval(k: Kernel, t):
    """Exact value of ``K(t)``."""
    return k(t)


def laplace_measure(k: Kernel) -> LaplaceMeasure:
    return k.laplace_measure()


# --------------------------------------------------------------------------
# Hoelder exponent diagnostic
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaReport:
    gamma_fit: float
    slope_small: float
    slope_shift: float
    gamma_stored: float
    passed: bool


def _squared_integral(k: Kernel, h: float) -> float:
    """int_0^h K(t)^2 dt."""
    e = 2 * k.sing_exponent
    val, _ = integrate.quad(lambda t: k.regular(t) ** 2, 0.0, h, weight="alg", wvar=(e, 0.0),
                            epsabs=0.0, epsrel=1e-11, limit=200)
    return val


def _shift_integral(k: Kernel, h: float, T: float) -> float:
    """int_0^T (K(t + h) - K(t))^2 dt."""
    e = 2 * k.sing_exponent

    def f(t):
        t = max(t, 1e-300)
        return (k(t + h) - k(t)) ** 2 / t**e if e else (k(t + h) - k(t)) ** 2

    pts = [p for p in (h, 10 * h) if p < T]
    if e:
        val, _ = integrate.quad(lambda t: (k.regular(t) - k(t + h) * t ** (-k.sing_exponent)) ** 2,
                                0.0, T, weight="alg", wvar=(e, 0.0), epsabs=0.0, epsrel=1e-10, limit=400)
    else:
        val, _ = integrate.quad(f, 0.0, T, points=pts or None, epsabs=0.0, epsrel=1e-10, limit=400)
    return val


def kernel_gamma_check(k: Kernel, grid: TimeGrid, n_levels: int = 6) -> GammaReport:
    """Log-log fit of the two (H0) integrals against ``h`` on a dyadic ladder of cell widths."""
    hs = grid.dt * 2.0 ** np.arange(n_levels)
    small = np.array([_squared_integral(k, h) for h in hs])
    shift = np.array([_shift_integral(k, h, grid.T) for h in hs])
    with np.errstate(divide="ignore"):  # a constant kernel has zero shift integrals
        s1 = np.polyfit(np.log(hs), np.log(small), 1)[0]
        s2 = np.polyfit(np.log(hs), np.log(shift), 1)[0]
    fit = min(s1, s2)
    return GammaReport(float(fit), float(s1), float(s2), k.gamma,
                       bool(fit >= k.gamma - TOLERANCES["gamma_fit_slack"]))


# --------------------------------------------------------------------------
# Measures on the grid
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridMeasure:
    """Atom at 0, optional interior atoms, and a mass per grid cell.

    ``density_fn`` (when set) is the exact density's regular part, so that
    the density is ``s**density_exponent * density_fn(s)``; it lets
    convolutions use adaptive quadrature instead of cell averages.
    """

    grid: TimeGrid
    atom0: float
    cell_mass: np.ndarray
    atoms: tuple = ()
    density_fn: Callable | None = None
    density_exponent: float = 0.0
    residual: float = 0.0

    @property
    def density(self) -> np.ndarray:
        """Per-cell density values (mass per unit time)."""
        return self.cell_mass / self.grid.dt

    def cumulative(self) -> np.ndarray:
        """Measure of [0, t_j] for every node."""
        out = self.atom0 + np.concatenate([[0.0], np.cumsum(self.cell_mass)])
        for loc, mass in self.atoms:
            out = out + mass * (self.grid.times >= loc)
        return out

    def total_variation(self) -> float:
        return abs(self.atom0) + float(np.sum(np.abs(self.cell_mass))) + sum(abs(m) for _, m in self.atoms)

    @property
    def closed_form(self) -> bool:
        return self.density_fn is not None or not np.any(self.cell_mass)


def _check_resolvent_shape(m: GridMeasure) -> None:
    slack = TOLERANCES["monotone_slack_rel"] * max(1.0, float(np.max(np.abs(m.cell_mass), initial=0.0)))
    if m.atom0 < 0 or np.any(m.cell_mass < -slack):
        raise NumericalFailure("resolvent is not a nonnegative measure", float(np.min(m.cell_mass)))
    # L([s, s+t]) non-increasing  <=>  cell masses non-increasing (atom sits at 0)
    if np.any(np.diff(m.cell_mass) > slack):
        raise NumericalFailure("resolvent density is not non-increasing",
                               float(np.max(np.diff(m.cell_mass))))


def resolvent_first_kind(k: Kernel, grid: TimeGrid, check: bool = True) -> GridMeasure:
    """Measure ``L`` with ``K * L == 1`` on the grid."""
    edges = grid.times
    if k.is_constant:
        c = float(np.sum(k.c)) if isinstance(k, ExpSum) else k.c
        m = GridMeasure(grid, 1.0 / c, np.zeros(grid.n_steps), density_fn=None)
    elif isinstance(k, Fractional):
        a = k.alpha
        norm = 1.0 / (k.c * math.gamma(1 - a))
        mass = norm * (edges[1:] ** (1 - a) - edges[:-1] ** (1 - a)) / (1 - a)
        m = GridMeasure(grid, 0.0, mass, density_fn=lambda s: np.full_like(np.asarray(s, float), norm),
                        density_exponent=-a)
    elif isinstance(k, GammaKernel):
        m = _gamma_resolvent(k, grid)
    else:
        m = _deconvolve(k, grid)
    if m.density_fn is not None:
        resid = float(np.max(np.abs(conv_measure_fun(m, k)[1:] - 1.0)))
        m = GridMeasure(m.grid, m.atom0, m.cell_mass, m.atoms, m.density_fn, m.density_exponent, resid)
    if check:
        limit = TOLERANCES["resolvent_closed_form" if m.closed_form else "resolvent_deconvolved"]
        if m.residual > limit:
            raise NumericalFailure(f"resolvent residual {m.residual:.3e} exceeds {limit:.1e}", m.residual)
        _check_resolvent_shape(m)
    return m


def _gamma_resolvent(k: GammaKernel, grid: TimeGrid) -> GridMeasure:
    a, lam, c = k.alpha, k.lambda_k, k.c
    if lam == 0:
        return resolvent_first_kind(Fractional(c, a), grid, check=False)
    g1a = math.gamma(1 - a)

    def regular(s):
        s = np.asarray(s, dtype=float)
        return (np.exp(-lam * s) / g1a + s**a * lam**a * special.gammainc(1 - a, lam * s)) / c

    def cumulative(b):
        x = lam * b
        return lam ** (a - 1) / c * (special.gammainc(1 - a, x) + x * special.gammainc(1 - a, x)
                                     - (1 - a) * special.gammainc(2 - a, x))

    mass = np.diff(cumulative(grid.times))
    return GridMeasure(grid, 0.0, mass, density_fn=regular, density_exponent=-a)


def _deconvolve(k: Kernel, grid: TimeGrid) -> GridMeasure:
    """Forward substitution on ``atom0 K(t_n) + sum_k m_k w_{n-1-k} = 1``."""
    n = grid.n_steps
    w = k.cell_integrals(grid.dt, n) / grid.dt
    atom0 = 1.0 / float(k(0.0))
    rhs = 1.0 - atom0 * k(grid.times[1:])
    mass = np.zeros(n)
    for j in range(n):
        acc = rhs[j] - np.dot(mass[:j], w[j:0:-1])
        mass[j] = acc / w[0]
    m = GridMeasure(grid, atom0, mass)
    resid = float(np.max(np.abs(conv_measure_fun(m, k) - 1.0)))
    return GridMeasure(grid, atom0, mass, residual=resid)


# --------------------------------------------------------------------------
# Convolutions
# --------------------------------------------------------------------------


def _full_conv(w: np.ndarray, f: np.ndarray, n_out: int) -> np.ndarray:
    """out[n] = sum_{j<=n} w[j] f[n-j] for n < n_out; f may carry trailing batch axes."""
    if f.ndim == 1:
        return np.convolve(w, f)[:n_out]
    flat = f.reshape(f.shape[0], -1)
    cols = [np.convolve(w, flat[:, i])[:n_out] for i in range(flat.shape[1])]
    return np.stack(cols, axis=-1).reshape((n_out,) + f.shape[1:])


@dataclass(frozen=True)
class ProductWeights:
    """Product-integration weights of a kernel on a grid.

    For piecewise-linear ``f``::

        (K * f)(t_n) = sum_{j=0}^{n-1} A_j f_{n-j} + B_j f_{n-1-j}

    ``I`` are the plain cell integrals, used for left-point rules.
    """

    A: np.ndarray
    B: np.ndarray
    I: np.ndarray
    dt: float

    @classmethod
    def build(cls, k: Kernel, grid: TimeGrid) -> "ProductWeights":
        n = grid.n_steps
        I = k.cell_integrals(grid.dt, n)
        J = k.cell_first_moments(grid.dt, n)
        B = J / grid.dt
        return cls(I - B, B, I, grid.dt)

    def lag_weights(self) -> np.ndarray:
        """c_j with (K * f)(t_n) = sum_j c_j f_{n-j} - A_n f_0 correction handled by conv()."""
        c = np.zeros(len(self.A) + 1)
        c[:-1] += self.A
        c[1:] += self.B
        return c

    def conv(self, f: np.ndarray) -> np.ndarray:
        n_out = f.shape[0]
        c = self.lag_weights()[:n_out]
        out = _full_conv(c, f, n_out)
        # lag j = n uses only B_{n-1}; remove the A_n f_0 term that c_n carries
        A_pad = np.zeros(n_out)
        m = min(n_out, len(self.A))
        A_pad[:m] = self.A[:m]
        out[1:] -= A_pad[1:].reshape((-1,) + (1,) * (f.ndim - 1)) * f[0]
        out[0] = 0.0
        return out


def conv_kernel_fun(k: Kernel, f, grid: TimeGrid) -> np.ndarray:
    """``(K * f)(t_j)`` for a grid function ``f`` taken piecewise linear."""
    f = np.asarray(f)
    if f.shape[0] != grid.n_steps + 1:
        raise ValueError("f must have one value per grid node")
    return ProductWeights.build(k, grid).conv(f)


def conv_measure_fun(m: GridMeasure, f) -> np.ndarray:
    """Stieltjes convolution ``int_[0,t] f(t - s) m(ds)`` on the grid.

    ``f`` is either a grid function (piecewise linear) or a :class:`Kernel`.
    Against a kernel, a closed-form density is integrated with adaptive
    quadrature; otherwise the cell masses are spread uniformly and the
    kernel is integrated exactly over each cell.  For a singular kernel the
    value at t = 0 is the right limit.
    """
    grid = m.grid
    t = grid.times
    if isinstance(f, Kernel):
        k = f
        if m.density_fn is not None:
            out = np.empty(t.size)
            for j, tj in enumerate(t):
                tj = tj if tj > 0 else 1e-9 * grid.dt
                out[j] = _quad_kernel_density(k, m, tj, 0.0)
                if m.atom0:
                    out[j] += m.atom0 * float(k(tj))
            return out
        w = k.cell_integrals(grid.dt, grid.n_steps) / grid.dt
        out = np.zeros(t.size)
        out[1:] = np.convolve(m.cell_mass, w)[: grid.n_steps]
        if m.atom0:
            k_vals = np.empty(t.size)
            k_vals[1:] = k(t[1:])
            k_vals[0] = k(0.0) if not k.singular else np.inf
            out += m.atom0 * k_vals
        for loc, mass in m.atoms:
            pos = t > loc
            out[pos] += mass * k(t[pos] - loc)
        return out
    f = np.asarray(f)
    if f.shape[0] != t.size:
        raise ValueError("f must have one value per grid node")
    fbar = 0.5 * (f[1:] + f[:-1])
    out = m.atom0 * f.astype(np.result_type(f, float))
    out[1:] = out[1:] + _full_conv(m.cell_mass, fbar, grid.n_steps)
    for loc, mass in m.atoms:
        out = out + mass * np.interp(t - loc, t, f, left=0.0) * (t >= loc)
    return out


def _quad_kernel_density(k: Kernel, m: GridMeasure, t: float, h: float) -> float:
    """int_0^t K(h + t - s) density(s) ds with algebraic end-point weights."""
    if h == 0:
        val, _ = integrate.quad(lambda s: k.regular(t - s) * m.density_fn(s), 0.0, t, weight="alg",
                                wvar=(m.density_exponent, k.sing_exponent), epsabs=1e-14, epsrel=1e-12,
                                limit=200)
    else:
        val, _ = integrate.quad(lambda s: k(h + t - s) * m.density_fn(s), 0.0, t, weight="alg",
                                wvar=(m.density_exponent, 0.0), epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


# --------------------------------------------------------------------------
# Shifted kernels
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ShiftedResolvent:
    """``Phi = Delta_h K * L`` on the grid and its derivative measure ``dPhi``.

    ``centroid[k]`` (when computed) is the position of the ``dPhi`` mass
    inside cell ``k`` as a fraction of the cell width.
    """

    h: float
    values: np.ndarray
    measure: GridMeasure
    centroid: np.ndarray | None = None


def _shifted_values(k: Kernel, h: float, grid: TimeGrid, L: GridMeasure | None) -> np.ndarray:
    t = grid.times
    if h == 0 or k.is_constant:
        return np.ones(t.size)
    if isinstance(k, Fractional):
        # 1 - int_(0,h] K(h - s) L(t + ds), closed form through 2F1
        a = k.alpha
        out = np.zeros(t.size)
        tt = t[1:]
        z = h / tt
        integral = h**a * tt ** (-a) / a * special.hyp2f1(a, 1.0, a + 1.0, -z)
        out[1:] = 1.0 - integral / (math.gamma(a) * math.gamma(1 - a))
        return out
    L = resolvent_first_kind(k, grid) if L is None else L
    if L.density_fn is not None:
        out = np.empty(t.size)
        for j, tj in enumerate(t):
            if tj == 0:
                val, _ = integrate.quad(lambda u: k.regular(h - u) * L.density_fn(u), 0.0, h, weight="alg",
                                        wvar=(L.density_exponent, k.sing_exponent), epsabs=1e-14,
                                        epsrel=1e-12, limit=200)
            else:
                val, _ = integrate.quad(lambda u: k.regular(h - u) * (tj + u) ** L.density_exponent
                                        * L.density_fn(tj + u), 0.0, h, weight="alg",
                                        wvar=(0.0, k.sing_exponent), epsabs=1e-14, epsrel=1e-12, limit=200)
            out[j] = 1.0 - val
        return out
    # cell masses spread uniformly, shifted kernel integrated exactly over each cell
    w = k.cell_integrals(grid.dt, grid.n_steps, offset=h) / grid.dt
    out = L.atom0 * k(h + t)
    out[1:] += np.convolve(L.cell_mass, w)[: grid.n_steps]
    return out


def shifted_resolvent_direct(k: Kernel, h: float, grid: TimeGrid, L: GridMeasure | None = None) -> np.ndarray:
    """``int_[0,t] K(h + t - s) L(ds)`` by direct adaptive quadrature (cross-check route)."""
    L = resolvent_first_kind(k, grid) if L is None else L
    t = grid.times
    if L.density_fn is None:
        return _shifted_values(k, h, grid, L)
    out = np.array([_quad_kernel_density(k, L, tj, h) if tj > 0 else 0.0 for tj in t])
    if L.atom0:
        out += L.atom0 * k(h + t)
    return out


def _check_phi(phi: np.ndarray, h: float) -> None:
    slack = TOLERANCES["monotone_slack_rel"] * max(1.0, float(np.max(np.abs(phi))))
    if np.any(phi < -slack) or np.any(phi > 1 + slack):
        raise NumericalFailure(f"Delta_h K * L leaves [0, 1] (h={h}); grid too coarse?",
                               float(max(-phi.min(), phi.max() - 1)))
    if np.any(np.diff(phi) < -slack):
        raise NumericalFailure(f"Delta_h K * L not non-decreasing (h={h})", float(-np.diff(phi).min()))


def shifted_resolvent_conv(k: Kernel, h: float, grid: TimeGrid, L: GridMeasure | None = None,
                           centroids: bool = False) -> ShiftedResolvent:
    """``Delta_h K * L`` on the grid with its derivative measure.

    The measure puts ``Phi(0)`` as atom at 0 and the increments of ``Phi``
    as cell masses.  Values must lie in [0, 1] and be non-decreasing.

    With ``centroids`` the values are computed on the half-step grid (``L``,
    if given, must then live on that grid) and each cell also gets the
    centre of mass of ``dPhi`` from the fitted density model.
    """
    if h < 0:
        raise DomainError("shift h must be >= 0")
    if not centroids:
        phi = _shifted_values(k, h, grid, L)
        _check_phi(phi, h)
        return ShiftedResolvent(h, phi, GridMeasure(grid, float(phi[0]), np.diff(phi)))
    fine = grid.refine(2)
    phi_fine = _shifted_values(k, h, fine, L)
    _check_phi(phi_fine, h)
    phi = phi_fine[::2]
    mass = np.diff(phi)
    cent = np.full(grid.n_steps, 0.5)
    if h > 0 and not k.is_constant:
        beta = _density_exponent(k)
        coef_a, coef_b = _cell_density_model(phi_fine, grid, beta)
        lo, hi = grid.times[:-1], grid.times[1:]
        p0, p1, p2 = _cell_power_moments(lo, hi, beta, 2)
        first = coef_a * p1 + coef_b * p2
        ok = mass > 1e-14 * max(1.0, float(phi[-1]))
        cent[ok] = np.clip(first[ok] / (mass[ok] * grid.dt), 0.0, 1.0)
    return ShiftedResolvent(h, phi, GridMeasure(grid, float(phi[0]), mass), cent)


def _density_exponent(k: Kernel) -> float:
    return -k.alpha if (k.singular and not k.is_constant) else 0.0


def _cell_power_moments(lo, hi, beta: float, order: int):
    """``int_lo^hi s^beta (s - lo)^j ds`` for j = 0..order."""
    lo = np.asarray(lo, dtype=float)
    w = np.asarray(hi, dtype=float) - lo
    s = lo[:, None] + w[:, None] * _GL_X[None, :]
    at_zero = lo == 0
    sb = np.where(at_zero[:, None], 1.0, s) ** beta
    out = []
    for j in range(order + 1):
        vals = w ** (j + 1) * ((sb * _GL_X[None, :] ** j) @ _GL_W)
        vals[at_zero] = w[at_zero] ** (beta + j + 1) / (beta + j + 1)
        out.append(vals)
    return out


def _cell_density_model(fine_values: np.ndarray, grid: TimeGrid, beta: float):
    """Per-cell density ``s^beta (a + b (s - t_k))`` matching the two half-cell masses."""
    lo = grid.times[:-1]
    mid = lo + 0.5 * grid.dt
    hi = grid.times[1:]
    m1 = fine_values[1::2] - fine_values[0:-1:2]
    m2 = fine_values[2::2] - fine_values[1::2]
    a0, a1 = _cell_power_moments(lo, mid, beta, 1)
    b0, b1 = _cell_power_moments(mid, hi, beta, 1)
    b1 = b1 + 0.5 * grid.dt * b0  # moment about lo, not mid
    det = a0 * b1 - a1 * b0
    coef_a = (m1 * b1 - m2 * a1) / det
    coef_b = (a0 * m2 - b0 * m1) / det
    return coef_a, coef_b


def reconstruct_shifted_kernel(k: Kernel, h: float, grid: TimeGrid, t_max: float | None = None):
    """Rebuild ``Delta_h K`` as ``Phi(0) K + dPhi * K``.

    Returns ``(rebuilt values at t_1..t_N, max relative error vs K(t + h))``.
    ``dPhi`` is modelled on each cell as ``s^beta (a + b s)`` with ``beta`` the
    resolvent's singular exponent, fitted to ``Phi`` on the half-step grid, and
    integrated against ``K`` with exact product moments.
    """
    fine = grid.refine(2)
    phi_fine = _shifted_values(k, h, fine, None)
    phi0 = phi_fine[0]
    beta = _density_exponent(k)
    if k.is_constant or h == 0:
        rebuilt = phi0 * k(grid.times[1:])
    else:
        coef_a, coef_b = _cell_density_model(phi_fine, grid, beta)
        t = grid.times
        lo, hi = t[:-1], t[1:]
        rebuilt = np.empty(grid.n_steps)
        for n in range(1, grid.n_steps + 1):
            m0, m1 = k.product_moments(t[n], lo[:n], hi[:n], beta)
            rebuilt[n - 1] = phi0 * k(t[n]) + np.dot(coef_a[:n], m0) + np.dot(coef_b[:n], m1)
    exact = k(grid.times[1:] + h)
    t_max = grid.T if t_max is None else t_max
    sel = grid.times[1:] <= t_max * (1 + 1e-12)
    err = float(np.max(np.abs(rebuilt[sel] - exact[sel]) / np.abs(exact[sel])))
    return rebuilt, err
