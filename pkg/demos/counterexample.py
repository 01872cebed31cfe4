"""Picard iteration on the periodic counterexample: stable for rho >= 1/2, divergent below.

    python3 demos/counterexample.py
"""

from entropic_pia.pia import fit_rate
from entropic_pia.problems import counterexample_grid, counterexample_oracle, counterexample_picard

grid = counterexample_grid(512)
for rho in (1.0, 0.25):
    iterates = counterexample_picard(rho, grid, 9)
    print(f"rho = {rho}")
    print(f"  {'n':>2} {'grid v_x(0)':>14} {'closed form':>14}")
    for n, v in enumerate(iterates):
        print(f"  {n:>2} {v.dx[0]:>14.6f} {counterexample_oracle(rho, n):>14.6f}")
    odd = [1, 3, 5, 7, 9]
    fit = fit_rate([abs(iterates[n].dx[0]) for n in odd], steps=odd)
    eta = "" if fit.eta is None else f", eta = {fit.eta:.4f}"
    print(f"  odd-step |v_x(0)| classified {fit.classification.value}{eta}\n")
