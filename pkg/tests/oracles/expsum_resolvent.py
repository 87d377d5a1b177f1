"""Closed-form resolvent of the first kind for a sum of exponentials.

Laplace transform: K^(p) = sum c_i / (p + x_i), and L^(p) = 1 / (p K^(p)) is
a rational function.  Partial fractions give L = a0 delta_0 + sum_r R_r e^{r t} dt.
Independent of the package: numpy polynomial algebra only.
"""
import numpy as np
from numpy.polynomial import polynomial as P


def expsum_resolvent(c, x):
    c = np.asarray(c, float)
    x = np.asarray(x, float)
    den = np.array([1.0])
    for xi in x:
        den = P.polymul(den, [xi, 1.0])
    num = np.zeros(len(x))
    for i, ci in enumerate(c):
        term = np.array([ci])
        for j, xj in enumerate(x):
            if j != i:
                term = P.polymul(term, [xj, 1.0])
        num = P.polyadd(num, term)
    # L^(p) = den(p) / (p num(p))
    q = P.polymul([0.0, 1.0], num)
    atom0 = den[-1] / q[-1]
    rest = P.polysub(den, atom0 * q)
    poles = P.polyroots(q)
    dq = P.polyder(q)
    residues = P.polyval(poles, rest) / P.polyval(poles, dq)
    return float(atom0), poles, residues


def cumulative(atom0, poles, residues, t):
    """L([0, t])."""
    t = np.asarray(t, float)
    out = np.full_like(t, atom0, dtype=complex)
    for r, R in zip(poles, residues):
        if abs(r) < 1e-14:
            out += R * t
        else:
            out += R * np.expm1(r * t) / r
    return out.real
