"""Linear 1D elliptic and backward-parabolic solvers with frozen coefficients.

Elliptic:   rho w = c2 w_xx + c1 w_x + f
Parabolic:  w_t + c2 w_xx + c1 w_x + f - rho w = 0,  w(T) = terminal

Second-order central differences; a node whose cell Peclet number
|c1| h / c2 exceeds 2 is switched to first-order upwinding so that the system
matrix stays an M-matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np

from .model import Boundary, Grid1D, TimeGrid, ValueField

log = logging.getLogger(__name__)

PECLET_LIMIT = 2.0


class PdeSolveError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LinearPdeCoefficients:
    second_order: np.ndarray
    first_order: np.ndarray
    source: np.ndarray
    discount: float = 0.0
    min_second_order: float = 0.0   # sigma_min**2 / 2 when known

    def __post_init__(self):
        c2, c1, f = (np.asarray(v, dtype=float) for v in (self.second_order, self.first_order, self.source))
        n = max(c2.size, c1.size, f.size)
        c2, c1, f = (np.broadcast_to(v, (n,)) for v in (c2, c1, f))
        object.__setattr__(self, "second_order", c2)
        object.__setattr__(self, "first_order", c1)
        object.__setattr__(self, "source", f)
        if not (np.all(np.isfinite(c2)) and np.all(np.isfinite(c1)) and np.all(np.isfinite(f))):
            raise ValueError("non-finite PDE coefficients")
        if self.discount < 0:
            raise ValueError("discount must be nonnegative")
        floor = max(self.min_second_order - 1e-12, 0.0)
        if np.any(c2 <= 0) or np.any(c2 < floor):
            raise ValueError(f"ellipticity violated: min second-order coefficient {c2.min():.3e}")


class Tridiagonal(NamedTuple):
    lower: np.ndarray   # lower[i] multiplies w[i-1]; lower[0] wraps to w[n-1] if cyclic
    diag: np.ndarray
    upper: np.ndarray   # upper[i] multiplies w[i+1]; upper[n-1] wraps to w[0] if cyclic
    cyclic: bool
    n_upwind: int
    n_outward_boundary: int   # boundary rows with a positive off-diagonal


def assemble(coeffs: LinearPdeCoefficients, grid: Grid1D, shift: float) -> Tridiagonal:
    """Matrix of ``shift * I - (c2 D_xx + c1 D_x)`` on ``grid``."""
    c2, c1 = coeffs.second_order, coeffs.first_order
    n = grid.n_nodes
    if c2.size != n:
        raise ValueError(f"coefficients have {c2.size} entries, grid has {n} nodes")
    h = grid.spacing
    d2 = c2 / h**2

    upwind = np.abs(c1) * h > PECLET_LIMIT * c2
    fwd = upwind & (c1 > 0)
    bwd = upwind & (c1 < 0)
    lower = -d2 + c1 / (2 * h)
    upper = -d2 - c1 / (2 * h)
    diag = shift + 2 * d2
    lower = np.where(fwd, -d2, np.where(bwd, -d2 + c1 / h, lower))
    upper = np.where(fwd, -d2 - c1 / h, np.where(bwd, -d2, upper))
    diag = np.where(fwd, diag + c1 / h, np.where(bwd, diag - c1 / h, diag))

    cyclic = grid.boundary is Boundary.PERIODIC
    n_out = 0
    if not cyclic:
        upwind[[0, -1]] = False
        if grid.boundary is Boundary.LINEAR_EXTRAPOLATION:
            # zero second difference at the ends: pure transport rows
            diag[0], upper[0] = shift + c1[0] / h, -c1[0] / h
            diag[-1], lower[-1] = shift - c1[-1] / h, c1[-1] / h
            n_out = int(c1[0] < 0) + int(c1[-1] > 0)
        else:
            diag[0], upper[0] = shift + 2 * d2[0], -2 * d2[0]
            diag[-1], lower[-1] = shift + 2 * d2[-1], -2 * d2[-1]
        lower[0] = 0.0
        upper[-1] = 0.0
    n_up = int(upwind.sum())
    if n_up:
        log.info("upwinded %d of %d nodes (cell Peclet > %g)", n_up, n, PECLET_LIMIT)
    if n_out:
        log.info("%d boundary rows carry outward drift; the row is not monotone", n_out)
    return Tridiagonal(lower, diag, upper, cyclic, n_up, n_out)


def thomas(lower, diag, upper, rhs) -> np.ndarray:
    """Solve a tridiagonal system; ``lower[0]`` and ``upper[-1]`` are ignored."""
    a = np.asarray(lower, dtype=float).tolist()
    b = np.asarray(diag, dtype=float).tolist()
    c = np.asarray(upper, dtype=float).tolist()
    d = np.asarray(rhs, dtype=float).tolist()
    n = len(b)
    cp = [0.0] * n
    dp = [0.0] * n
    den = b[0]
    if abs(den) < 1e-300:
        raise PdeSolveError("zero pivot at row 0")
    cp[0] = c[0] / den
    dp[0] = d[0] / den
    for i in range(1, n):
        den = b[i] - a[i] * cp[i - 1]
        if abs(den) < 1e-300:
            raise PdeSolveError(f"zero pivot at row {i}")
        cp[i] = c[i] / den
        dp[i] = (d[i] - a[i] * dp[i - 1]) / den
    x = [0.0] * n
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return np.array(x)


def cyclic_thomas(lower, diag, upper, rhs) -> np.ndarray:
    """Periodic tridiagonal solve via a Sherman-Morrison rank-one correction.

    ``lower[0]`` couples row 0 to the last unknown and ``upper[-1]`` couples
    the last row to the first.
    """
    lower = np.asarray(lower, dtype=float)
    diag = np.asarray(diag, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = diag.size
    alpha, beta = upper[-1], lower[0]
    gamma = -diag[0]
    bb = diag.copy()
    bb[0] -= gamma
    bb[-1] -= alpha * beta / gamma
    x = thomas(lower, bb, upper, rhs)
    u = np.zeros(n)
    u[0], u[-1] = gamma, alpha
    z = thomas(lower, bb, upper, u)
    denom = 1.0 + z[0] + beta * z[-1] / gamma
    if abs(denom) < 1e-300:
        raise PdeSolveError("singular cyclic system")
    fact = (x[0] + beta * x[-1] / gamma) / denom
    return x - fact * z


def matvec(m: Tridiagonal, w: np.ndarray) -> np.ndarray:
    out = m.diag * w
    out[1:] += m.lower[1:] * w[:-1]
    out[:-1] += m.upper[:-1] * w[1:]
    if m.cyclic:
        out[0] += m.lower[0] * w[-1]
        out[-1] += m.upper[-1] * w[0]
    return out


def solve_system(m: Tridiagonal, rhs: np.ndarray) -> np.ndarray:
    w = cyclic_thomas(m.lower, m.diag, m.upper, rhs) if m.cyclic else thomas(m.lower, m.diag, m.upper, rhs)
    if not np.all(np.isfinite(w)):
        raise PdeSolveError("non-finite solution; the system is singular or badly conditioned")
    res = np.max(np.abs(matvec(m, w) - rhs))
    scale = np.max(np.abs(m.diag * w)) + np.max(np.abs(rhs)) + 1e-300
    if res > 1e-12 * scale:
        raise PdeSolveError(f"relative residual {res / scale:.2e} after tridiagonal solve")
    return w


def solve_elliptic(coeffs: LinearPdeCoefficients, grid: Grid1D) -> ValueField:
    """Solve rho w = c2 w_xx + c1 w_x + f on ``grid``."""
    if not coeffs.discount > 0:
        raise PdeSolveError("elliptic solve needs a positive discount")
    m = assemble(coeffs, grid, coeffs.discount)
    return ValueField.from_values(grid, solve_system(m, coeffs.source))


CoefficientsInTime = Union[LinearPdeCoefficients, Sequence[LinearPdeCoefficients]]


def solve_parabolic(coeffs_per_step: CoefficientsInTime, terminal: ValueField, tgrid: TimeGrid) -> ValueField:
    """Backward implicit-Euler march from ``terminal`` at T down to t = 0.

    ``coeffs_per_step[k]`` holds the coefficients at time level ``k`` (either
    ``n_steps`` or ``n_steps + 1`` entries; a single object means
    time-independent). Level ``k`` is solved from level ``k + 1`` with the
    coefficients of level ``k``. Returns values of shape
    ``(n_steps + 1, n_nodes)`` indexed by time level.
    """
    grid = terminal.grid
    n_steps = tgrid.n_steps
    if isinstance(coeffs_per_step, LinearPdeCoefficients):
        coeffs_per_step = [coeffs_per_step] * n_steps
    if len(coeffs_per_step) not in (n_steps, n_steps + 1):
        raise ValueError(f"expected {n_steps} or {n_steps + 1} coefficient sets, got {len(coeffs_per_step)}")
    if terminal.values.ndim != 1:
        raise ValueError("terminal field must be a single time level")

    inv_dt = 1.0 / tgrid.dt
    out = np.empty((n_steps + 1, grid.n_nodes))
    out[-1] = terminal.values
    for k in range(n_steps - 1, -1, -1):
        c = coeffs_per_step[k]
        m = assemble(c, grid, inv_dt + c.discount)
        try:
            out[k] = solve_system(m, out[k + 1] * inv_dt + c.source)
        except PdeSolveError as exc:
            raise PdeSolveError(f"time level {k}: {exc}") from exc
    return ValueField.from_values(grid, out)
