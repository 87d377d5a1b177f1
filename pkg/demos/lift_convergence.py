"""
A handful of exponentials in place of a rough kernel
====================================================

The fractional kernel is completely monotone, so it is a mixture of
exponentials.  Cutting its mixing measure into geometric cells gives a
finite sum ``K_n``, a Markovian model with ``n`` factors.  The table shows
how the kernel error and the characteristic-function error shrink with
``n``; both plateau once the unresolved short time scales below the grid
step dominate.
"""
import time

import numpy as np

from volterra_heston.curves import make_classical_curve
from volterra_heston.grid import TimeGrid
from volterra_heston.kernels import Fractional
from volterra_heston.lift import discretize_measure
from volterra_heston.riccati import ModelParams
from volterra_heston.transform import characteristic_function, lift_characteristic_function

k = Fractional(1.0, 0.6)
params = ModelParams(2.0, 0.3, -0.7)
grid = TimeGrid.from_horizon(1.0, 500)
g0 = make_classical_curve(0.04, 0.08, params.lam, k)
z = np.array([0.5, 1.0, 2.0])
reference = characteristic_function(params, k, g0, z, grid)

print(f"{'n':>4} {'L2 kernel error':>16} {'cf error':>10} {'K_n(1)/K(1)':>12} {'seconds':>8}")
for n in (2, 5, 10, 20, 40):
    start = time.perf_counter()
    dm = discretize_measure(k, n, T=grid.T, dt=grid.dt)
    cf = lift_characteristic_function(params, dm, g0, z, grid)
    elapsed = time.perf_counter() - start
    print(f"{n:4d} {dm.l2_error(k, grid.dt, grid.T):16.4f} {np.max(np.abs(cf - reference)):10.2e} "
          f"{float(dm(1.0)) / float(k(1.0)):12.3f} {elapsed:8.3f}")

# the smallest and largest factor speeds
dm = discretize_measure(k, 10, T=grid.T, dt=grid.dt)
print("\nnodes (n=10):", np.array2string(dm.nodes, precision=2))
print("weights:     ", np.array2string(dm.weights, precision=3))
