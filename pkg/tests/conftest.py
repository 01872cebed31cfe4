import numpy as np
import pytest

from entropic_pia.hamiltonian import problem_quadrature
from entropic_pia.pia import PiaConfig, reference_solution, run_pia
from entropic_pia.problems import diffusion_benchmark, smooth_benchmark

# (criterion, line) pairs filled by test_acceptance; printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def record_acceptance(k: int, passed: bool, detail: str) -> str:
    line = f"ACCEPTANCE {k}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append((k, line))
    print(line)
    return line


class BenchRun:
    def __init__(self, spec, **params):
        self.spec = spec
        self.problem = spec.build(**params)
        self.grid = spec.grid
        self.quad = problem_quadrature(self.problem, spec.quad_nodes)
        self.tgrid = spec.time_grid(self.problem)
        self.config = PiaConfig(max_iter=500)
        self.reference = reference_solution(self.problem, self.grid, self.tgrid, self.quad, self.config)
        self.run = run_pia(self.problem, self.grid, self.quad, self.tgrid, self.config,
                           reference=self.reference.field)

    @property
    def report(self):
        return self.run.report


@pytest.fixture(scope="session")
def smooth_rho20():
    return BenchRun(smooth_benchmark(), discount=20.0)


@pytest.fixture(scope="session")
def smooth_rho005():
    return BenchRun(smooth_benchmark(), discount=0.05)


@pytest.fixture(scope="session")
def smooth_finite():
    return BenchRun(smooth_benchmark(), horizon=1.0)


@pytest.fixture(scope="session")
def diffusion_rho20():
    return BenchRun(diffusion_benchmark(), discount=20.0)


@pytest.fixture(scope="session")
def diffusion_rho005():
    return BenchRun(diffusion_benchmark(), discount=0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
