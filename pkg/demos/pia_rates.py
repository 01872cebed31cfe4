"""Policy iteration on the smooth benchmark at a large and a small discount.

The error to the discrete fixed point collapses faster than geometrically
once the iteration is close; monotone improvement holds in both cases.

    python3 demos/pia_rates.py
"""

from entropic_pia.hamiltonian import problem_quadrature
from entropic_pia.pia import PiaConfig, run_pia
from entropic_pia.problems import smooth_benchmark

spec = smooth_benchmark()
for params in ({"discount": 20.0}, {"discount": 0.05}, {"horizon": 1.0}):
    problem = spec.build(**params)
    quad = problem_quadrature(problem, spec.quad_nodes)
    run = run_pia(problem, spec.grid, quad, spec.time_grid(problem), PiaConfig(max_iter=500))
    rep = run.report
    print(", ".join(f"{k} = {v}" for k, v in params.items()))
    print(f"  {'n':>2} {'eps0':>10} {'eps1':>10} {'eps2':>10} {'min increment':>14}")
    for n in range(len(rep)):
        print(f"  {n:>2} {rep.eps0[n]:>10.2e} {rep.eps1[n]:>10.2e} {rep.eps2[n]:>10.2e} "
              f"{rep.monotonicity_violation[n]:>14.2e}")
    print("  rates: " + ", ".join(f"{k} {v.classification.value}" for k, v in rep.rates.items()))
    print(f"  stopped on {rep.termination} after {len(rep) - 1} iterations\n")
