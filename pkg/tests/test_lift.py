import math

import numpy as np
import pytest

from volterra_heston.curves import AdmissibilityChecker, Tabulated, forward_variance, make_classical_curve
from volterra_heston.errors import DomainError
from volterra_heston.grid import TimeGrid
from volterra_heston.kernels import ExpSum, Fractional, GammaKernel, constant_kernel
from volterra_heston.lift import (
    DiscretizedMeasure,
    check_D_mu,
    discretize_measure,
    reconstruct_forward_curve,
    simulate_lift,
)
from volterra_heston.montecarlo import evolve_forward_curves, mc_stats, simulate
from volterra_heston.riccati import FLArgument, ModelParams, solve_chi2, solve_psi2

ROUGH = Fractional(1.0, 0.6)
TWO_EXP = ExpSum(((0.6, 0.3), (0.4, 2.0)))
PARAMS = ModelParams(2.0, 0.3, -0.7)
GRID = TimeGrid(1 / 200, 200)


def test_atomic_measure_passes_through():
    dm = discretize_measure(ExpSum(((1.0, 0.5),)), 7)
    np.testing.assert_array_equal(dm.nodes, [0.5])
    np.testing.assert_array_equal(dm.weights, [1.0])
    two = discretize_measure(ExpSum(((0.4, 2.0), (0.6, 0.3))), 3)
    np.testing.assert_array_equal(two.nodes, [0.3, 2.0])


def test_invalid_measures():
    with pytest.raises(DomainError):
        DiscretizedMeasure(np.array([1.0, 0.5]), np.array([1.0, 1.0]))
    with pytest.raises(DomainError):
        DiscretizedMeasure(np.array([0.5]), np.array([-1.0]))
    with pytest.raises(DomainError):
        discretize_measure(ROUGH, 0)


def test_fractional_nodes_approximate_kernel():
    dm = discretize_measure(ROUGH, 20, T=1.0, dt=1e-3)
    assert 0.95 <= float(dm(1.0)) / float(ROUGH(1.0)) <= 1.05
    assert dm.provenance.startswith("geometric")
    # the first cell [0, 1/T] has its barycentre at (1 - a)/(2 - a)
    assert dm.nodes[0] == pytest.approx(0.4 / 1.4)


@pytest.mark.parametrize("k", [ROUGH, GammaKernel(1.0, 0.75, 1.0)])
def test_l2_error_decreases_with_nodes(k):
    errs = [discretize_measure(k, n, 1.0, 1e-3).l2_error(k, 1e-3, 1.0) for n in (5, 10, 20, 40)]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_gamma_nodes_start_at_shift():
    dm = discretize_measure(GammaKernel(1.0, 0.75, 2.0), 10)
    assert dm.nodes[0] > 2.0


def test_check_D_mu_examples():
    dm = discretize_measure(ROUGH, 10, 1.0, 1 / 200)
    assert check_D_mu(0.0, dm, GRID).passed
    rep = check_D_mu(0.05, dm, GRID)
    assert rep.g0_at_zero == pytest.approx(0.05 * float(dm(0.0)))
    assert rep.ladder and rep.tolerance > 0
    U = np.zeros(dm.size)
    U[-1] = -100.0
    assert not check_D_mu(U, dm, GRID).passed


def test_reconstruct_trivial_cases():
    g0 = make_classical_curve(0.04, 0.04, 2.0, TWO_EXP)
    dm = discretize_measure(TWO_EXP, 2)
    curve = reconstruct_forward_curve(np.zeros(2), g0, dm, 0.0)
    np.testing.assert_allclose(curve(GRID.times), g0(GRID.times), atol=1e-15)
    U = np.array([0.01, -0.02])
    assert float(reconstruct_forward_curve(U, g0, dm, 0.3)(0.0)) == pytest.approx(
        float(g0(0.3)) + 0.6 * 0.01 - 0.4 * 0.02)


def test_single_node_is_classical_heston():
    lam, theta, v0 = 2.0, 0.04, 0.06
    dm = discretize_measure(constant_kernel(), 1)
    g0 = make_classical_curve(v0, theta, lam, constant_kernel())
    lp = simulate_lift(0.0, g0, dm, ModelParams(lam, 0.3, -0.7), TimeGrid(1 / 250, 250), 20000, seed=3)
    st = mc_stats(lp, {"kind": "terminal_v"})
    assert abs(st.mean - (theta + (v0 - theta) * math.exp(-lam))) <= 3 * st.stderr


def test_deterministic_lift_matches_forward_variance():
    dm = discretize_measure(ROUGH, 12, 1.0, 1 / 400)
    kn = dm.kernel()
    g0 = make_classical_curve(0.04, 0.02, 2.0, kn)
    errs = []
    for n in (100, 200, 400):
        grid = TimeGrid.from_horizon(1.0, n)
        lp = simulate_lift(0.0, g0, dm, ModelParams(2.0, 0.0, 0.0), grid, 1, seed=0)
        errs.append(np.max(np.abs(lp.V[0] - forward_variance(g0, 2.0, kn, grid))))
    assert errs[2] < errs[1] < errs[0] < 1e-3


def test_lift_equals_volterra_paths_for_exact_atoms():
    g0 = make_classical_curve(0.04, 0.04, 2.0, TWO_EXP)
    dm = discretize_measure(TWO_EXP, 5)
    lp = simulate_lift(0.0, g0, dm, PARAMS, GRID, 300, seed=4, factor_times=[0.5])
    ps = simulate(PARAMS, g0, TWO_EXP, GRID, 300, seed=4, store_increments=True)
    np.testing.assert_allclose(lp.V, ps.V, atol=1e-14)
    np.testing.assert_allclose(lp.log_s, ps.log_s, atol=1e-14)
    curves = evolve_forward_curves(ps, 0.5, g0)
    rebuilt = np.array([reconstruct_forward_curve(u, g0, dm, 0.5)(GRID.times[:101]) for u in lp.factors[0.5]])
    np.testing.assert_allclose(rebuilt, curves, atol=1e-14)


def test_lift_threads_deterministic():
    g0 = Tabulated(np.array([0.0, 1.0]), np.array([0.04, 0.05]))
    dm = discretize_measure(ROUGH, 8, 1.0, 1 / 200)
    a = simulate_lift(0.0, g0, dm, PARAMS, GRID, 600, seed=1, threads=1)
    b = simulate_lift(0.0, g0, dm, PARAMS, GRID, 600, seed=1, threads=4)
    assert a.V.tobytes() == b.V.tobytes() and a.log_s.tobytes() == b.log_s.tobytes()


def test_lift_state_stays_admissible():
    dm = discretize_measure(ROUGH, 10, 1.0, 1 / 200)
    kn = dm.kernel()
    p = ModelParams(0.3, 0.1, -0.7)
    g0 = make_classical_curve(0.04, 0.04, p.lam, kn)
    lp = simulate_lift(0.0, g0, dm, p, GRID, 200, seed=9, factor_times=[0.5])
    sub = TimeGrid(GRID.dt, 100)
    checker = AdmissibilityChecker(kn, sub)
    ok = 0
    for u in lp.factors[0.5]:
        curve = reconstruct_forward_curve(u, g0, dm, 0.5)
        ok += checker.check(curve, tol=1e-6).passed
    assert ok / lp.n_paths >= 0.99


def test_lift_riccati_converges_to_fractional():
    grid = TimeGrid(1 / 500, 500)
    arg = FLArgument.characteristic(1.0)
    ref = solve_psi2(ROUGH, arg, PARAMS, grid).psi2
    errs = [np.max(np.abs(solve_chi2(discretize_measure(ROUGH, n, 1.0, grid.dt), arg, PARAMS, grid).psi2 - ref))
            for n in (5, 10, 20, 40)]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_initial_state_check():
    dm = discretize_measure(TWO_EXP, 2)
    g0 = make_classical_curve(0.04, 0.04, 2.0, TWO_EXP)
    with pytest.raises(DomainError):
        simulate_lift(np.array([-1.0, -1.0]), g0, dm, PARAMS, GRID, 2, seed=0, check=True)
