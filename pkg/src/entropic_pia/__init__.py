"""Policy iteration for entropy-regularized stochastic control in one space dimension."""

__version__ = "0.1.0"

from .model import (Boundary, ControlProblem, DiscreteNorms, Grid1D, Mode, TimeGrid, ValueField,
                    finite_difference_derivatives, norms)
from .hamiltonian import (ActionQuadrature, GibbsEval, GridHamiltonian, HamiltonianEval, HBoundReport,
                          gauss_legendre, gibbs_policy, hamiltonian, problem_quadrature, verify_h_bound)
from .pde import LinearPdeCoefficients, PdeSolveError, solve_elliptic, solve_parabolic
from .pia import (ConvergenceError, IterationError, IterationReport, PiaConfig, PiaRun, RateClass, RateFit,
                  ReferenceSolution, fit_rate, frozen_coefficients, pia_diffusion_1d, pia_finite_horizon,
                  pia_infinite_horizon, reference_solution, run_pia)
from .feynman_kac import (McEstimate, PathBundle, SdeSpec, compare_with_grid, mc_gradient,
                          mc_second_derivative_unit_sigma, mc_value, simulate_paths)
from .problems import (DEFAULT_REGISTRY, ProblemSpec, audit_problem, counterexample_oracle, counterexample_picard,
                       diffusion_benchmark, get_problem, smooth_benchmark)
