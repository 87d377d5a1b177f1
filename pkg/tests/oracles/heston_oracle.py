"""Closed-form classical Heston characteristic function and prices.

Textbook formulas (Albrecher et al. "little trap" form, Heston 1993 P1/P2
inversion), evaluated in mpmath at 30 digits.  This file is deliberately
independent of the package: it shares no code with ``volterra_heston``.

Run as a script to regenerate ``tests/fixtures/heston_classical.json``.
"""
import json
import pathlib

import mpmath as mp

mp.mp.dps = 30


def heston_cf(z, T, v0, kappa, theta, sigma, rho, s0=1.0):
    """E[exp(i z log S_T)] for dS = S sqrt(V) dB, dV = kappa(theta - V)dt + sigma sqrt(V) dW."""
    z = mp.mpc(z)
    iz = 1j * z
    beta = kappa - rho * sigma * iz
    d = mp.sqrt(beta**2 + sigma**2 * (iz + z**2))
    g = (beta - d) / (beta + d)
    e = mp.exp(-d * T)
    D = (beta - d) / sigma**2 * (1 - e) / (1 - g * e)
    C = kappa * theta / sigma**2 * ((beta - d) * T - 2 * mp.log((1 - g * e) / (1 - g)))
    return mp.exp(iz * mp.log(s0) + C + D * v0)


def heston_call(strike, T, v0, kappa, theta, sigma, rho, s0=1.0):
    """Heston (1993) two-probability formula with zero rates."""
    k = mp.log(strike)

    def phi(u):
        return heston_cf(u, T, v0, kappa, theta, sigma, rho, s0)

    fwd = phi(-1j)  # E[S_T]

    def p1_integrand(u):
        return mp.re(mp.exp(-1j * u * k) * phi(u - 1j) / (1j * u * fwd))

    def p2_integrand(u):
        return mp.re(mp.exp(-1j * u * k) * phi(u) / (1j * u))

    p1 = 0.5 + mp.quad(p1_integrand, [0, 10, 50, 200, mp.inf]) / mp.pi
    p2 = 0.5 + mp.quad(p2_integrand, [0, 10, 50, 200, mp.inf]) / mp.pi
    return s0 * p1 - strike * p2


CLASSICAL = dict(kappa=2.0, sigma=0.3, rho=-0.7, s0=1.0)


def build_fixture():
    out = {"cf_theta0": [], "cf_martingale": [], "calls": []}
    # g0 == V0 = 0.04  <=>  theta = 0
    for z in [0.25, 0.5, 1.0, 2.0, 4.0]:
        v = heston_cf(z, 1.0, 0.04, theta=0.0, **CLASSICAL)
        out["cf_theta0"].append({"z": z, "T": 1.0, "v0": 0.04, "re": float(mp.re(v)), "im": float(mp.im(v))})
    for theta in [0.0, 0.04]:
        v = heston_cf(-1j, 1.0, 0.04, theta=theta, **CLASSICAL)
        out["cf_martingale"].append({"theta": theta, "re": float(mp.re(v)), "im": float(mp.im(v))})
    # V0 = theta = 0.04, T = 1
    for strike in [0.8, 0.9, 1.0, 1.1, 1.2]:
        c = heston_call(strike, 1.0, 0.04, theta=0.04, **CLASSICAL)
        out["calls"].append({"strike": strike, "T": 1.0, "v0": 0.04, "theta": 0.04, "price": float(c)})
    out["params"] = dict(CLASSICAL)
    return out


if __name__ == "__main__":
    path = pathlib.Path(__file__).resolve().parents[1] / "fixtures" / "heston_classical.json"
    path.write_text(json.dumps(build_fixture(), indent=2) + "\n")
    print(f"wrote {path}")
