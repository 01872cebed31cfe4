"""Gibbs policy, entropic Hamiltonian and its derivatives by quadrature over A.

The unnormalized Gibbs weight ``exp(score / lambda)`` is never formed: every
integral goes through a max-shifted log-sum-exp so that tiny temperatures and
large gradients stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

from .model import ControlProblem, Grid1D, Mode


@dataclass(frozen=True, eq=False)
class ActionQuadrature:
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def length(self) -> float:
        return float(np.sum(self.weights))

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)


def gauss_legendre(lo: float, hi: float, n_nodes: int = 32, panels: int = 1) -> ActionQuadrature:
    """Composite Gauss-Legendre rule on [lo, hi] with ``panels`` equal panels."""
    if not lo < hi:
        raise ValueError("empty interval")
    if n_nodes < 1 or panels < 1:
        raise ValueError("need at least one node and one panel")
    ref_x, ref_w = np.polynomial.legendre.leggauss(n_nodes)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * ref_x[None, :]).ravel()
    weights = (half[:, None] * ref_w[None, :]).ravel()
    return ActionQuadrature(nodes, weights)


def problem_quadrature(problem: ControlProblem, n_nodes: int = 32, panels: int = 1) -> ActionQuadrature:
    return gauss_legendre(problem.action_lo, problem.action_hi, n_nodes, panels)


class GibbsArrays(NamedTuple):
    """Everything one Gibbs evaluation produces, vectorized over leading axes."""

    logits: np.ndarray        # s(a) at action nodes, shape (..., m)
    log_partition: np.ndarray  # log of the quadrature of exp(s)
    density: np.ndarray       # Gamma at action nodes
    entropy: np.ndarray
    h_val: np.ndarray         # H
    h_z: np.ndarray
    h_q: np.ndarray           # zero in drift mode
    residual_h: np.ndarray    # H - H_z z - H_q q


def gibbs_arrays(b, r, s2, z, q, temperature: float, quad: ActionQuadrature) -> GibbsArrays:
    """Core kernel.

    ``b``, ``r`` and ``s2`` (sigma squared, or ``None`` in drift mode) are
    coefficient values at the action nodes with shape ``(..., m)``; ``z`` and
    ``q`` broadcast against the leading axes.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(z, dtype=float)[..., None]
    score = b * z + r
    if s2 is not None:
        q = np.asarray(q, dtype=float)[..., None]
        score = score + 0.5 * s2 * q
    s = score / temperature
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite Gibbs logits")

    # shift by the max logit: where Gamma concentrates the shifted logits are
    # near zero, so entropy = log Z - mean(s) does not cancel large numbers
    top = np.max(s, axis=-1, keepdims=True)
    shifted = s - top
    log_z_shift = logsumexp(shifted + quad.log_weights, axis=-1)
    log_z = top[..., 0] + log_z_shift
    density = np.exp(shifted - log_z_shift[..., None])
    gw = density * quad.weights
    h_z = np.sum(gw * b, axis=-1)
    if s2 is not None:
        h_q = 0.5 * np.sum(gw * s2, axis=-1)
    else:
        h_q = np.zeros_like(h_z)
    h_val = temperature * log_z
    entropy = log_z_shift - np.sum(gw * shifted, axis=-1)
    # H - H_z z - H_q q = (Gamma-averaged r) + lambda * entropy; this form has no cancellation in q
    residual_h = np.sum(gw * r, axis=-1) + temperature * entropy
    return GibbsArrays(s, log_z, density, entropy, h_val, h_z, h_q, residual_h)


def _coefficients_at(problem: ControlProblem, quad: ActionQuadrature, x):
    x = np.asarray(x, dtype=float)[..., None]
    a = quad.nodes
    shape = np.broadcast_shapes(x.shape, a.shape)
    b = np.broadcast_to(problem.drift(x, a), shape)
    r = np.broadcast_to(problem.running_reward(x, a), shape)
    s2 = None
    if problem.mode is Mode.DIFFUSION_CONTROL_1D:
        s2 = np.broadcast_to(problem.diffusion(x, a), shape) ** 2
    return b, r, s2


def _check_q(problem: ControlProblem, q):
    diffusion = problem.mode is Mode.DIFFUSION_CONTROL_1D
    if diffusion and q is None:
        raise ValueError("diffusion-control problems need the second-derivative argument q")
    if not diffusion and q is not None:
        raise ValueError("q is only meaningful for diffusion-control problems")


@dataclass(frozen=True)
class GibbsEval:
    log_weights: np.ndarray
    log_partition: float
    density: np.ndarray
    entropy: float


@dataclass(frozen=True)
class HamiltonianEval:
    h_val: float
    h_z: float
    h_q: float
    residual_h: float


def gibbs_policy(problem: ControlProblem, quad: ActionQuadrature, x: float, z: float,
                 q: Optional[float] = None) -> GibbsEval:
    """Gibbs density over the action nodes at a single state."""
    _check_q(problem, q)
    b, r, s2 = _coefficients_at(problem, quad, x)
    g = gibbs_arrays(b, r, s2, z, q, problem.temperature, quad)
    return GibbsEval(g.logits, float(g.log_partition), g.density, float(g.entropy))


def hamiltonian(problem: ControlProblem, quad: ActionQuadrature, x: float, z: float,
                q: Optional[float] = None) -> HamiltonianEval:
    """H, H_z, H_q and h at a single point; H_q and h use q = 0 in drift mode."""
    _check_q(problem, q)
    b, r, s2 = _coefficients_at(problem, quad, x)
    g = gibbs_arrays(b, r, s2, z, q, problem.temperature, quad)
    return HamiltonianEval(float(g.h_val), float(g.h_z), float(g.h_q), float(g.residual_h))


class GridHamiltonian:
    """Hamiltonian evaluator with the coefficient tables cached on grid x action nodes."""

    def __init__(self, problem: ControlProblem, grid: Grid1D, quad: ActionQuadrature):
        self.problem = problem
        self.grid = grid
        self.quad = quad
        self.b, self.r, self.s2 = _coefficients_at(problem, quad, grid.nodes)

    @property
    def diffusion_mode(self) -> bool:
        return self.s2 is not None

    def __call__(self, z, q=None) -> GibbsArrays:
        """Evaluate at per-node gradients ``z`` (shape ``(..., n)``)."""
        _check_q(self.problem, q)
        return gibbs_arrays(self.b, self.r, self.s2, z, q, self.problem.temperature, self.quad)

    @property
    def drift_range(self):
        return self.b.min(axis=-1), self.b.max(axis=-1)


@dataclass(frozen=True)
class HBoundReport:
    epsilon: float
    z_coefficient: float
    max_violation: float      # max of |h| - eps|q| - C|z| over the sample
    c_eps: float              # smallest constant making the bound hold on the sample
    c_eps_decade: float       # same constant at eps / 10
    superlinear: bool         # c_eps > 0 grew by more than 10x over that decade


def verify_h_bound(problem: ControlProblem, quad: ActionQuadrature, samples, epsilon: float,
                   z_coefficient: Optional[float] = None) -> HBoundReport:
    """Empirical check of |h(x,z,q)| <= eps|q| + C|z| + C_eps on sampled (x, z, q) rows.

    ``C`` defaults to the problem's coefficient bound. The fitted constants are
    empirical; they make no claim about the sizes an existence proof produces.
    """
    if problem.mode is not Mode.DIFFUSION_CONTROL_1D:
        raise ValueError("the h bound concerns diffusion-control problems")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.size == 0:
        raise ValueError("empty sample")
    if samples.shape[-1] != 3:
        raise ValueError("samples must be rows of (x, z, q)")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    c = problem.coefficient_bound if z_coefficient is None else float(z_coefficient)

    x, z, q = samples.T
    b, r, s2 = _coefficients_at(problem, quad, x)
    h = gibbs_arrays(b, r, s2, z, q, problem.temperature, quad).residual_h

    def excess(eps):
        return float(np.max(np.abs(h) - eps * np.abs(q) - c * np.abs(z)))

    viol = excess(epsilon)
    c_eps = max(viol, 0.0)
    c_dec = max(excess(epsilon / 10), 0.0)
    # a zero constant at eps carries no growth information
    superlinear = c_eps > 0 and c_dec > 10 * c_eps
    return HBoundReport(epsilon, c, viol, c_eps, c_dec, superlinear)
