"""Pressure Poisson operator on the masked grid and its two solvers.

The unknown is the projection potential phi = (dt / rho) * p at fluid cells.
Walls and the inlet are homogeneous Neumann boundaries; the outlet faces hold
a Dirichlet value half a cell beyond the last cell centre. The residual
L phi - rhs therefore has divergence units (1/s), which is what the
tolerance is measured in.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import PoissonConvergenceError
from .geometry import Mesh
from .models import PoissonMethod

logger = logging.getLogger(__name__)

POISSON_TOLERANCE = 1e-10
MAX_ITERATIONS = 50_000
REFINEMENT_PASSES = 3


@dataclass(frozen=True, eq=False)
class PressureOperator:
    """Sparse Laplacian with the outlet Dirichlet coupling split out.

    L phi = matrix @ phi + outlet_coupling * phi_out
    """
    matrix: sparse.csr_matrix
    outlet_coupling: np.ndarray
    neighbours: np.ndarray
    coefficients: np.ndarray
    diagonal: np.ndarray
    colors: tuple[np.ndarray, np.ndarray]
    relaxation: float


@lru_cache(maxsize=16)
def pressure_operator(mesh: Mesh) -> PressureOperator:
    n = mesh.n_fluid
    idx = mesh.fluid_index
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    # neighbours[c, k] for k in (W, E, S, N); n means "no neighbour"
    neighbours = np.full((n, 4), n, dtype=int)
    coefficients = np.zeros((n, 4))

    def couple(a: np.ndarray, b: np.ndarray, coeff: float, k_ab: int, k_ba: int) -> None:
        rows.extend([a, b, a, b])
        cols.extend([a, b, b, a])
        vals.extend([np.full(a.shape, -coeff), np.full(a.shape, -coeff), np.full(a.shape, coeff), np.full(a.shape, coeff)])
        neighbours[a, k_ab] = b
        neighbours[b, k_ba] = a
        coefficients[a, k_ab] = coeff
        coefficients[b, k_ba] = coeff

    ui, uj = np.nonzero(mesh.u_open)
    couple(idx[ui - 1, uj], idx[ui, uj], 1.0 / mesh.dx**2, 1, 0)
    vi, vj = np.nonzero(mesh.v_open)
    couple(idx[vi, vj - 1], idx[vi, vj], 1.0 / mesh.dy**2, 3, 2)

    outlet_coupling = np.zeros(n)
    oi, oj = np.nonzero(mesh.u_outlet)
    outlet_coupling[idx[oi - 1, oj]] = 2.0 / mesh.dx**2
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(-outlet_coupling)

    matrix = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    diagonal = coefficients.sum(axis=1) + outlet_coupling
    parity = mesh.fluid_ij.sum(axis=1) % 2
    colors = (np.flatnonzero(parity == 0), np.flatnonzero(parity == 1))
    relaxation = 2.0 / (1.0 + np.sin(np.pi / max(mesh.nx, mesh.ny)))
    for arr in (outlet_coupling, neighbours, coefficients, diagonal, *colors):
        arr.setflags(write=False)
    return PressureOperator(matrix, outlet_coupling, neighbours, coefficients, diagonal, colors, relaxation)


class _Factorization:
    """Sparse LU factors guarded by a lock so ensemble threads can share them."""

    def __init__(self, operator: PressureOperator):
        self._lu = splu(operator.matrix.tocsc())
        self._lock = threading.Lock()

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        with self._lock:
            return self._lu.solve(rhs)


@lru_cache(maxsize=16)
def _factorization(mesh: Mesh) -> _Factorization:
    logger.debug(f"Factorizing pressure operator for {mesh.nx}x{mesh.ny} mesh ({mesh.n_fluid} unknowns)")
    return _Factorization(pressure_operator(mesh))


def apply_operator(mesh: Mesh, phi: np.ndarray, boundary_value: float) -> np.ndarray:
    op = pressure_operator(mesh)
    return op.matrix @ phi + op.outlet_coupling * boundary_value


def residual(mesh: Mesh, phi: np.ndarray, rhs: np.ndarray, boundary_value: float) -> float:
    """Max-norm of L phi - rhs."""
    return float(np.max(np.abs(apply_operator(mesh, phi, boundary_value) - rhs), initial=0.0))


def _solve_direct(mesh: Mesh, rhs: np.ndarray, boundary_value: float, tol: float) -> tuple[np.ndarray, int]:
    op = pressure_operator(mesh)
    lu = _factorization(mesh)
    shifted = rhs - op.outlet_coupling * boundary_value
    phi = lu.solve(shifted)
    passes = 0
    while (res := residual(mesh, phi, rhs, boundary_value)) > tol:
        if passes == REFINEMENT_PASSES:
            raise PoissonConvergenceError(f"direct solve residual {res:.3e} above tolerance {tol:.1e}")
        phi = phi + lu.solve(rhs - apply_operator(mesh, phi, boundary_value))
        passes += 1
    return phi, passes + 1


def _solve_sor(
    mesh: Mesh, rhs: np.ndarray, boundary_value: float, tol: float, max_iter: int, initial: np.ndarray | None
) -> tuple[np.ndarray, int]:
    op = pressure_operator(mesh)
    n = mesh.n_fluid
    padded = np.zeros(n + 1)
    padded[:n] = boundary_value if initial is None else initial
    source = op.outlet_coupling * boundary_value - rhs
    for iteration in range(1, max_iter + 1):
        for color in op.colors:
            gathered = np.sum(op.coefficients[color] * padded[op.neighbours[color]], axis=1)
            gauss_seidel = (gathered + source[color]) / op.diagonal[color]
            padded[color] += op.relaxation * (gauss_seidel - padded[color])
        if iteration % 10 == 0 and residual(mesh, padded[:n], rhs, boundary_value) <= tol:
            return padded[:n].copy(), iteration
    res = residual(mesh, padded[:n], rhs, boundary_value)
    if res <= tol:
        return padded[:n].copy(), max_iter
    raise PoissonConvergenceError(f"SOR stopped at {max_iter} iterations with residual {res:.3e}")


def solve_pressure(
    mesh: Mesh,
    rhs: np.ndarray,
    boundary_value: float = 0.0,
    method: PoissonMethod = PoissonMethod.DIRECT,
    tol: float = POISSON_TOLERANCE,
    max_iter: int = MAX_ITERATIONS,
    initial: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Solve L phi = rhs with phi = boundary_value at the outlet.

    Args:
        mesh: Mesh the operator is assembled on
        rhs: Per-fluid-cell right-hand side (divergence units)
        boundary_value: Outlet Dirichlet value of phi
        method: direct LU or red-black SOR
        tol: Max-norm residual the solution must reach
        max_iter: SOR iteration cap
        initial: SOR starting guess

    Returns:
        (phi, iterations)
    """
    if method == PoissonMethod.SOR:
        return _solve_sor(mesh, rhs, boundary_value, tol, max_iter, initial)
    return _solve_direct(mesh, rhs, boundary_value, tol)
