"""1d Lagrange finite elements on a uniform mesh of (0, L).

Two nested ansatz spaces are used throughout: V (order 1 or 2 Lagrange,
dimension order*n_cells + 1) for the parabolic state and V0 = {v in V :
v(0) = 0} for the elliptic state.  Degrees of freedom are nodal values,
ordered left to right; V0 simply drops the node at x = 0.

All bilinear forms are assembled with Gauss-Legendre quadrature using
order + 1 points per cell, which integrates the mass integrand exactly
for polynomial coefficients and keeps a consistent quadrature error
otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps

from .problem import ProblemDefinition

__all__ = [
    "FeSpace",
    "AssembledOperators",
    "build_space",
    "assemble",
    "initial_load",
    "project_initial",
    "boundary_vector",
]


@dataclass(frozen=True)
class FeSpace:
    """Uniform Lagrange space of given order on n_cells cells."""

    n_cells: int
    order: int
    length: float
    nodes: np.ndarray

    @property
    def dim_V(self) -> int:
        return self.nodes.size

    @property
    def dim_V0(self) -> int:
        return self.nodes.size - 1

    @property
    def cell_width(self) -> float:
        return self.length / self.n_cells


def build_space(length: float, n_cells: int, order: int) -> FeSpace:
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if n_cells < 1:
        raise ValueError("need at least one cell")
    nodes = np.linspace(0.0, length, order * n_cells + 1)
    return FeSpace(n_cells, order, length, nodes)


def _reference_shapes(order: int, xi: np.ndarray):
    """Shape functions and derivatives on the reference cell [0, 1]."""
    if order == 1:
        N = np.stack([1.0 - xi, xi])
        dN = np.stack([-np.ones_like(xi), np.ones_like(xi)])
    else:
        N = np.stack([2.0 * (xi - 0.5) * (xi - 1.0), -4.0 * xi * (xi - 1.0), 2.0 * xi * (xi - 0.5)])
        dN = np.stack([4.0 * xi - 3.0, -8.0 * xi + 4.0, 4.0 * xi - 1.0])
    return N, dN


def _quadrature(order: int):
    """Gauss-Legendre points/weights mapped to [0, 1], order+1 points."""
    pts, wts = np.polynomial.legendre.leggauss(order + 1)
    return 0.5 * (pts + 1.0), 0.5 * wts


def _eval_coefficient(fn, x: np.ndarray, what: str) -> np.ndarray:
    vals = np.asarray(fn(x), dtype=float)
    vals = np.broadcast_to(vals, x.shape).copy()
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"{what} evaluated to a non-finite value")
    return vals


def _cell_dof_map(space: FeSpace) -> np.ndarray:
    p = space.order
    c = np.arange(space.n_cells)[:, None]
    return p * c + np.arange(p + 1)[None, :]


def _assemble_matrix(space: FeSpace, coeff_vals: np.ndarray | None, derivative: bool) -> sps.csr_matrix:
    """Assemble sum_cells int c(x) D^s N_a D^s N_b dx with s = derivative."""
    h = space.cell_width
    xi, w = _quadrature(space.order)
    N, dN = _reference_shapes(space.order, xi)
    B = dN / h if derivative else N  # (n_loc, n_q), physical derivative includes 1/h
    scale = h  # dx = h dxi
    if coeff_vals is None:
        elem = scale * np.einsum("q,aq,bq->ab", w, B, B)
        elems = np.broadcast_to(elem, (space.n_cells,) + elem.shape)
    else:
        elems = scale * np.einsum("cq,q,aq,bq->cab", coeff_vals, w, B, B)
    dofs = _cell_dof_map(space)
    rows = np.repeat(dofs, space.order + 1, axis=1).ravel()
    cols = np.tile(dofs, (1, space.order + 1)).ravel()
    n = space.dim_V
    return sps.coo_matrix((np.ascontiguousarray(elems).ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _quad_points(space: FeSpace) -> np.ndarray:
    xi, _ = _quadrature(space.order)
    left = np.linspace(0.0, space.length, space.n_cells + 1)[:-1]
    return left[:, None] + space.cell_width * xi[None, :]


@dataclass(frozen=True)
class AssembledOperators:
    """Sparse operators of the coupled system on a fixed space.

    M_y, A1 act on V; M_q, A2 act on V0 (rows/columns of the corresponding
    V matrices with the x = 0 node removed).  S_y and S_q are the Gramians
    of the V and V0 inner products (L2 + H1-seminorm, and H1-seminorm).
    ``boundary_index`` addresses the x = L degree of freedom in V0 vectors.
    """

    M_y: sps.csr_matrix
    A1: sps.csr_matrix
    M_q: sps.csr_matrix
    A2: sps.csr_matrix
    S_y: sps.csr_matrix
    S_q: sps.csr_matrix
    boundary_index: int


def assemble(problem: ProblemDefinition, space: FeSpace) -> AssembledOperators:
    xq = _quad_points(space)
    k1 = _eval_coefficient(problem.kappa1, xq, "kappa1")
    k2 = _eval_coefficient(problem.kappa2, xq, "kappa2")
    if np.any(k1 <= 0) or np.any(k2 <= 0):
        raise ValueError("diffusion coefficients must be positive on the mesh")

    M = _assemble_matrix(space, None, derivative=False)
    A1 = _assemble_matrix(space, k1, derivative=True)
    A2_full = _assemble_matrix(space, k2, derivative=True)
    K_plain = _assemble_matrix(space, None, derivative=True)

    return AssembledOperators(
        M_y=M,
        A1=A1,
        M_q=M[1:, 1:].tocsr(),
        A2=A2_full[1:, 1:].tocsr(),
        S_y=(M + K_plain).tocsr(),
        S_q=K_plain[1:, 1:].tocsr(),
        boundary_index=space.dim_V0 - 1,
    )


def initial_load(problem: ProblemDefinition, space: FeSpace) -> np.ndarray:
    """Load vector <y0, phi_i> of the initial datum, by cell quadrature."""
    h = space.cell_width
    xi, w = _quadrature(space.order)
    N, _ = _reference_shapes(space.order, xi)
    vals = _eval_coefficient(problem.y_init, _quad_points(space), "y_init")
    elems = h * np.einsum("cq,q,aq->ca", vals, w, N)
    load = np.zeros(space.dim_V)
    np.add.at(load, _cell_dof_map(space).ravel(), elems.ravel())
    return load


def project_initial(problem: ProblemDefinition, space: FeSpace, ops: AssembledOperators) -> np.ndarray:
    """L2 projection of the initial datum onto V, i.e. solve M_y y = <y0, phi>."""
    y0_nodes = _eval_coefficient(problem.y_init, space.nodes, "y_init")
    if np.any(y0_nodes <= 0):
        raise ValueError("initial state must be positive at mesh nodes")
    return sps.linalg.spsolve(ops.M_y.tocsc(), initial_load(problem, space))


def boundary_vector(problem: ProblemDefinition, space: FeSpace, t: float) -> np.ndarray:
    """Assembled Neumann functional <b(t), phi_i> = u(t) phi_i(L) on V0."""
    b = np.zeros(space.dim_V0)
    b[-1] = float(problem.u(t))
    return b
