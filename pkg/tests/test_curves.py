import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from tests.oracles.mittag_leffler import mittag_leffler
from volterra_heston.curves import (
    Tabulated,
    ThetaForm,
    check_admissible,
    forward_variance,
    make_classical_curve,
    shift_curve,
    solve_linear_volterra,
)
from volterra_heston.errors import DomainError
from volterra_heston.grid import TimeGrid
from volterra_heston.kernels import ExpSum, Fractional, GammaKernel, constant_kernel

GRID = TimeGrid(1e-3, 2000)
COARSE = TimeGrid(1 / 200, 200)
ROUGH = Fractional(1.0, 0.6)
TWO_EXP = ExpSum(((0.6, 0.3), (0.4, 2.0)))


def test_classical_curve_examples():
    assert np.all(make_classical_curve(0.04, 0.0, 0.3, ROUGH)(GRID.times) == 0.04)
    lin = make_classical_curve(0.0, 0.04, 1.0, constant_kernel())
    np.testing.assert_allclose(lin(GRID.times), 0.04 * GRID.times, atol=1e-15)
    g = make_classical_curve(0.04, 0.04, 0.3, ROUGH)
    assert float(g(1.0)) == pytest.approx(0.04 + 0.012 / (0.6 * math.gamma(0.6)), rel=1e-14)


def test_classical_curve_rejects_negative():
    with pytest.raises(DomainError):
        make_classical_curve(-0.01, 0.04, 1.0, ROUGH)
    with pytest.raises(DomainError):
        make_classical_curve(0.04, -0.04, 1.0, ROUGH)


def test_theta_form_measure_check():
    # negative theta compensated by V0 L(ds) is allowed, uncompensated is not
    ThetaForm(0.04, Tabulated(np.array([0.0, 1.0]), np.array([0.0, 0.0])), ROUGH)
    with pytest.raises(DomainError):
        ThetaForm(0.0, -0.1, ROUGH)
    ok = ThetaForm(1.0, Tabulated(np.array([0.5, 1.0]), np.array([-0.1, -0.1])), ROUGH)
    assert ok.V0 == 1.0


def test_theta_form_grid_and_pointwise_agree():
    theta = Tabulated(np.array([0.0, 0.7, 2.0]), np.array([0.1, 0.3, 0.05]))
    g = ThetaForm(0.02, theta, ROUGH)
    grid = TimeGrid(0.01, 200)
    on_grid = g.on_grid(grid)
    np.testing.assert_allclose(on_grid[::20], g(grid.times[::20]), atol=1e-10)


def test_tabulated_flat_extrapolation_and_csv(tmp_path):
    c = Tabulated(np.array([0.0, 1.0]), np.array([0.04, 0.06]))
    assert float(c(5.0)) == 0.06 and float(c(0.5)) == pytest.approx(0.05)
    path = tmp_path / "curve.csv"
    path.write_text("t,value\n0,0.04\n0.5,0.05\n1,0.06\n")
    d = Tabulated.from_csv(path)
    np.testing.assert_allclose(d.values, [0.04, 0.05, 0.06])
    with pytest.raises(DomainError):
        c(-1.0)


def test_shift_curve():
    g = make_classical_curve(0.0, 0.04, 1.0, constant_kernel())
    assert shift_curve(g, 0.0) is g
    np.testing.assert_allclose(shift_curve(g, 1.0)(GRID.times), 0.04 * (1 + GRID.times), atol=1e-15)
    theta = Tabulated(np.array([0.0, 1.0, 3.0]), np.array([0.1, 0.2, 0.0]))
    tf = ThetaForm(0.03, theta, ROUGH)
    s = shift_curve(tf, 0.5)
    for t in (0.0, 0.3, 1.2):
        direct = 0.03 + integrate.quad(lambda u: float(ROUGH.regular(u)) * float(theta(0.5 + t - u)), 0, 0.5 + t,
                                       weight="alg", wvar=(-0.4, 0), points=None, limit=400, epsabs=1e-15)[0]
        assert float(s(t)) == pytest.approx(direct, abs=1e-10)
    with pytest.raises(DomainError):
        shift_curve(g, -0.1)


def test_shift_curve_tabulates_on_grid():
    g = make_classical_curve(0.04, 0.04, 0.3, ROUGH)
    tab = shift_curve(g, 0.5, COARSE)
    np.testing.assert_allclose(tab.values, g(0.5 + COARSE.times), rtol=1e-13)


def test_admissible_non_decreasing_curve_passes():
    c = Tabulated(np.array([0.0, 0.5, 1.0, 3.0]), np.array([0.04, 0.05, 0.05, 0.08]))
    rep = check_admissible(c, ROUGH, GRID)
    assert rep.passed and rep.violations == []
    assert rep.ladder == GRID.shift_ladder()


def test_negative_start_fails():
    c = Tabulated(np.array([0.0, 1.0]), np.array([-0.01, 0.02]))
    rep = check_admissible(c, ROUGH, COARSE)
    assert not rep.passed and rep.worst_violation <= -0.01


def test_decreasing_curve_report_is_consistent():
    c = Tabulated(np.array([0.0, 0.5]), np.array([0.04, 0.0]))
    rep = check_admissible(c, ROUGH, GRID)
    assert rep.passed == (rep.worst_violation >= -rep.tolerance)
    assert not rep.passed  # dropping to zero violates the condition at short shifts


@pytest.mark.parametrize("k", [ROUGH, TWO_EXP, GammaKernel(1.0, 0.75, 1.0), constant_kernel()])
def test_theta_form_curves_pass(k):
    grid = TimeGrid(1 / 250, 250)
    for g in (make_classical_curve(0.04, 0.04, 0.3, k),
              ThetaForm(0.0, Tabulated(np.array([0.0, 1.0, 2.0]), np.array([0.2, 0.0, 0.1])), k)):
        assert check_admissible(g, k, grid).passed


@given(increments=st.lists(st.floats(0.0, 0.05), min_size=3, max_size=8), start=st.floats(0.0, 0.1))
@settings(max_examples=15, deadline=None)
def test_non_decreasing_curves_always_pass(increments, start):
    t = np.linspace(0, 2, len(increments) + 1)
    v = start + np.concatenate([[0.0], np.cumsum(increments)])
    assert check_admissible(Tabulated(t, v), ROUGH, COARSE).passed


@given(theta=st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6), v0=st.floats(0.0, 0.1))
@settings(max_examples=15, deadline=None)
def test_theta_form_property(theta, v0):
    t = np.linspace(0, 2, len(theta))
    g = ThetaForm(v0, Tabulated(t, np.array(theta)), ROUGH)
    assert check_admissible(g, ROUGH, COARSE).passed


def test_tightening_tolerance_never_helps():
    c = Tabulated(np.array([0.0, 0.5]), np.array([0.04, 0.0]))
    loose = check_admissible(c, ROUGH, COARSE, tol=1e-2)
    tight = check_admissible(c, ROUGH, COARSE, tol=1e-9)
    assert loose.worst_violation == tight.worst_violation
    assert not (tight.passed and not loose.passed)


def test_holder_diagnostic_is_flag_only():
    # a jump is not Hoelder continuous but a non-decreasing jump is admissible
    c = Tabulated(np.array([0.0, 0.5, 0.5 + 1e-9]), np.array([0.04, 0.04, 0.08]))
    rep = check_admissible(c, ROUGH, COARSE)
    assert rep.passed and rep.holder_flag


def test_forward_variance_trivial_and_exponential():
    g = make_classical_curve(0.04, 0.0, 1.0, ROUGH)
    np.testing.assert_array_equal(forward_variance(g, 0.0, ROUGH, GRID), 0.04)
    fv = forward_variance(g, 2.0, constant_kernel(), GRID)
    np.testing.assert_allclose(fv, 0.04 * np.exp(-2.0 * GRID.times), rtol=2e-6)


def test_forward_variance_mittag_leffler():
    lam = 0.3
    fv = forward_variance(make_classical_curve(0.04, 0.0, lam, ROUGH), lam, ROUGH, GRID)
    idx = np.arange(0, GRID.n_steps + 1, 100)
    ref = [0.04 * mittag_leffler(0.6, -lam * GRID.times[j] ** 0.6) for j in idx]
    np.testing.assert_allclose(fv[idx], ref, atol=1e-6)


def test_forward_variance_nonnegative_for_admissible_curves():
    for k in (ROUGH, TWO_EXP):
        g = ThetaForm(0.04, Tabulated(np.array([0.0, 1.0, 2.0]), np.array([0.0, 0.3, 0.0])), k)
        assert np.all(forward_variance(g, 3.0, k, COARSE) >= 0)


def test_linear_volterra_batched_complex():
    g = np.stack([np.ones(COARSE.n_steps + 1), np.cos(COARSE.times)], axis=1)
    u = solve_linear_volterra(ROUGH, g, 0.5 + 0.2j, COARSE)
    for col in range(2):
        np.testing.assert_allclose(u[:, col], solve_linear_volterra(ROUGH, g[:, col], 0.5 + 0.2j, COARSE))
