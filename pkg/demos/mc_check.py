"""Independent check of a grid solution by Feynman-Kac Monte Carlo.

The last policy-evaluation step solves a linear PDE; simulating its SDE and
integrating the discounted source reproduces the value and, through the
Bismut-Elworthy-Li weight, the gradient.

    python3 demos/mc_check.py
"""

import numpy as np

from entropic_pia.feynman_kac import compare_with_grid
from entropic_pia.hamiltonian import problem_quadrature
from entropic_pia.pia import PiaConfig, frozen_coefficients, run_pia
from entropic_pia.problems import smooth_benchmark

spec = smooth_benchmark()
problem = spec.build(discount=20.0)
quad = problem_quadrature(problem, spec.quad_nodes)
run = run_pia(problem, spec.grid, quad, None, PiaConfig())

# coefficients of the step that produced the last iterate
coeffs = frozen_coefficients(problem, spec.grid, quad, run.values[-2])
probes = compare_with_grid(run.values[-1], coeffs.first_order, np.sqrt(2 * coeffs.second_order), coeffs.source,
                           problem.discount, [-2.0, -1.0, 0.0, 1.0, 2.0], n_paths=10_000, dt_sim=2e-3, seed=11)

print(f"{'x0':>8} {'quantity':>9} {'grid':>10} {'mc':>10} {'se':>9} {'error':>9} {'budget':>9}")
for p in probes:
    print(f"{p.x0:>8.3f} {p.quantity:>9} {p.grid:>10.5f} {p.mc.mean:>10.5f} {p.mc.std_error:>9.2e} "
          f"{p.error:>9.2e} {p.budget:>9.2e}")
print("all within budget" if all(p.passed for p in probes) else "some probes outside budget")
