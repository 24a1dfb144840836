"""Bilinear quad FEM kernels on the fine grid.

Assembly uses 2x2 Gauss quadrature with the nodal coefficient interpolated
bilinearly to the quadrature points.  All element integrals are evaluated
in one shot over batches of cells, so the same kernels serve the global
fine system and the local neighborhood operators.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import ConfigurationError, DomainError, NumericalError
from .grid import StructuredGridPair

_GAUSS_1D = 1.0 / np.sqrt(3.0)

BoundaryData = Union[str, Callable[[np.ndarray, np.ndarray], np.ndarray], np.ndarray]
SourceData = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray], np.ndarray]


def _reference_tables(hx: float, hy: float):
    """Shape values and physical gradients at the four Gauss points.

    Returns (values (4g, 4a), grad product table (4g, 4a, 4b) scaled by the
    Jacobian, mass product table (4g, 4a, 4b) scaled by the Jacobian).
    """
    pts = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float) * _GAUSS_1D
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    vals = np.empty((4, 4))
    grads = np.empty((4, 4, 2))
    for g, (xi, et) in enumerate(pts):
        for a, (xa, ya) in enumerate(corners):
            vals[g, a] = 0.25 * (1 + xa * xi) * (1 + ya * et)
            grads[g, a, 0] = 0.25 * xa * (1 + ya * et) * (2.0 / hx)
            grads[g, a, 1] = 0.25 * ya * (1 + xa * xi) * (2.0 / hy)
    detj = 0.25 * hx * hy
    stiff = np.einsum("gad,gbd->gab", grads, grads) * detj
    mass = np.einsum("ga,gb->gab", vals, vals) * detj
    return vals, stiff, mass


def element_stiffness(grid: StructuredGridPair, kappa_elem: np.ndarray) -> np.ndarray:
    """Local stiffness matrices for cells with nodal coefficients kappa_elem.

    kappa_elem has shape (n_cells, 4) in the connectivity node order; the
    result has shape (n_cells, 4, 4).
    """
    vals, stiff, _ = _reference_tables(grid.hx, grid.hy)
    kg = kappa_elem @ vals.T
    return np.einsum("eg,gab->eab", kg, stiff)


def element_mass(grid: StructuredGridPair, coef_elem: np.ndarray) -> np.ndarray:
    """Local mass matrices weighted by a nodal coefficient."""
    vals, _, mass = _reference_tables(grid.hx, grid.hy)
    cg = coef_elem @ vals.T
    return np.einsum("eg,gab->eab", cg, mass)


def assemble_matrix(local: np.ndarray, conn: np.ndarray, n_nodes: int) -> scipy.sparse.csr_matrix:
    """Scatter batched 4x4 local matrices into a global CSR matrix."""
    e = conn.shape[0]
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    mat = scipy.sparse.coo_matrix(
        (local.reshape(e, 16).ravel(), (rows, cols)), shape=(n_nodes, n_nodes))
    return mat.tocsr()


def _source_at_gauss(grid: StructuredGridPair, conn: np.ndarray, source: SourceData) -> np.ndarray:
    vals, _, _ = _reference_tables(grid.hx, grid.hy)
    if callable(source):
        origin = grid.fine_coords[conn[:, 0]]
        loc = 0.5 * (1.0 + _GAUSS_1D * np.array(
            [[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float))
        xg = origin[:, None, 0] + loc[None, :, 0] * grid.hx
        yg = origin[:, None, 1] + loc[None, :, 1] * grid.hy
        return np.asarray(source(xg, yg), dtype=float)
    arr = np.asarray(source, dtype=float)
    if arr.ndim == 0:
        return np.full((conn.shape[0], 4), float(arr))
    return arr[conn] @ vals.T


def assemble_load(grid: StructuredGridPair, conn: np.ndarray, n_nodes: int,
                  source: SourceData) -> np.ndarray:
    vals, _, _ = _reference_tables(grid.hx, grid.hy)
    fg = _source_at_gauss(grid, conn, source)
    local = (fg @ vals) * (0.25 * grid.hx * grid.hy)
    out = np.zeros(n_nodes)
    np.add.at(out, conn.ravel(), local.ravel())
    return out


def _check_permeability(kappa: np.ndarray, n_nodes: int) -> np.ndarray:
    kappa = np.asarray(kappa, dtype=float)
    if kappa.shape != (n_nodes,):
        raise ConfigurationError(
            f"permeability has shape {kappa.shape}, expected ({n_nodes},)")
    bad = np.flatnonzero(~(kappa > 0.0))
    if bad.size:
        raise DomainError(
            f"permeability must be positive everywhere; first offending node {bad[0]}"
            f" has value {kappa[bad[0]]}")
    return kappa


def resolve_boundary(grid: StructuredGridPair, boundary: BoundaryData) -> np.ndarray:
    """Nodal values of the boundary data extended to all fine nodes.

    The extension is the bilinear interpolant of the data formula, used as
    the lift in coarse solves.  "linear" means g(x, y) = x.
    """
    x = grid.fine_coords[:, 0]
    y = grid.fine_coords[:, 1]
    if isinstance(boundary, str):
        if boundary != "linear":
            raise ConfigurationError(f"unknown boundary preset {boundary!r}")
        return x.copy()
    if callable(boundary):
        return np.asarray(boundary(x, y), dtype=float)
    arr = np.asarray(boundary, dtype=float)
    if arr.shape != (grid.n_fine_nodes,):
        raise ConfigurationError(
            f"boundary array has shape {arr.shape}, expected ({grid.n_fine_nodes},)")
    return arr.copy()


@dataclass
class FineSystem:
    """Assembled fine-grid system before boundary elimination.

    matrix and load cover all nodes; lift holds the boundary data extended
    to every node, and dirichlet_values = lift[dirichlet_nodes].
    """

    matrix: scipy.sparse.csr_matrix
    load: np.ndarray
    dirichlet_nodes: np.ndarray
    dirichlet_values: np.ndarray
    lift: np.ndarray
    grid: StructuredGridPair


def assemble_fine(grid: StructuredGridPair, kappa: np.ndarray,
                  source: SourceData = 1.0, boundary: BoundaryData = "linear") -> FineSystem:
    """Assemble stiffness and load for -div(kappa grad u) = f, u = g on the boundary."""
    kappa = _check_permeability(kappa, grid.n_fine_nodes)
    conn = grid.fine_elements
    local = element_stiffness(grid, kappa[conn])
    matrix = assemble_matrix(local, conn, grid.n_fine_nodes)
    load = assemble_load(grid, conn, grid.n_fine_nodes, source)
    lift = resolve_boundary(grid, boundary)
    dnodes = grid.boundary_fine_nodes()
    return FineSystem(matrix=matrix, load=load, dirichlet_nodes=dnodes,
                      dirichlet_values=lift[dnodes], lift=lift, grid=grid)


def solve_fine(system: FineSystem) -> np.ndarray:
    """Direct solve after Dirichlet elimination, with a residual check."""
    n = system.load.size
    mask = np.zeros(n, dtype=bool)
    mask[system.dirichlet_nodes] = True
    free = np.flatnonzero(~mask)
    if free.size == 0:
        return system.lift.copy()
    a = system.matrix.tocsc()
    a_ff = a[free][:, free]
    rhs = system.load[free] - a[free][:, system.dirichlet_nodes] @ system.dirichlet_values
    u_free = scipy.sparse.linalg.spsolve(a_ff, rhs)
    scale = max(float(np.linalg.norm(rhs)), 1e-300)
    res = float(np.linalg.norm(a_ff @ u_free - rhs)) / scale
    if not np.isfinite(res) or res > 1e-10:
        raise NumericalError(f"fine solve residual {res:.3e} exceeds 1e-10")
    u = system.lift.copy()
    u[free] = u_free
    return u


@dataclass
class EigArtifacts:
    """Eigenpairs of a symmetric pencil A v = lambda S v.

    values ascend; vectors are S-orthonormal columns with the sign fixed so
    the largest-magnitude component is positive.  mass_residual records
    ||V^T S V - I||_F as a health check.
    """

    values: np.ndarray
    vectors: np.ndarray
    mass_residual: float


def _densify(m) -> np.ndarray:
    if scipy.sparse.issparse(m):
        return np.asarray(m.todense(), dtype=float)
    return np.asarray(m, dtype=float)


def generalized_symmetric_eig(a, s, n_pairs: int) -> EigArtifacts:
    """Lowest n_pairs eigenpairs of the symmetric generalized problem.

    Matrices may be sparse or dense; they are densified (the pencils here
    are a few hundred rows at most).  S must be positive definite; a floor
    on its diagonal is the caller's job if the weight can vanish.
    """
    ad = _densify(a)
    sd = _densify(s)
    n = ad.shape[0]
    if ad.shape != (n, n) or sd.shape != (n, n):
        raise ConfigurationError(f"pencil shapes {ad.shape} and {sd.shape} do not match")
    if not 1 <= n_pairs <= n:
        raise ConfigurationError(f"n_pairs must be in [1, {n}], got {n_pairs}")
    ad = 0.5 * (ad + ad.T)
    sd = 0.5 * (sd + sd.T)
    try:
        vals, vecs = scipy.linalg.eigh(ad, sd)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(
            "generalized eigensolve failed; the mass factor is not positive "
            "definite (consider a relative diagonal floor)") from exc
    vals = vals[:n_pairs].copy()
    vecs = vecs[:, :n_pairs].copy()
    lead = np.argmax(np.abs(vecs), axis=0)
    flip = vecs[lead, np.arange(vecs.shape[1])] < 0.0
    vecs[:, flip] *= -1.0
    gram = vecs.T @ (sd @ vecs)
    mass_residual = float(np.linalg.norm(gram - np.eye(n_pairs)))
    return EigArtifacts(values=vals, vectors=vecs, mass_residual=mass_residual)


def assemble_operator_pair(grid: StructuredGridPair, cells: np.ndarray, nodes: np.ndarray,
                           kappa: np.ndarray, weight: np.ndarray, tables=None):
    """Stiffness (coefficient kappa) and weighted mass (coefficient weight)
    over a subset of fine cells, in the local numbering given by nodes.

    nodes must be sorted and contain every node of the given cells.  Both
    coefficients are global nodal arrays.  tables, if given, is a pair of
    precomputed all-cell local matrix batches (stiffness, mass); passing it
    lets callers that assemble many overlapping patches of the same fields
    skip the per-patch quadrature.
    """
    conn = grid.fine_elements[cells]
    local_conn = np.searchsorted(nodes, conn)
    n_loc = nodes.size
    if tables is None:
        stiff = element_stiffness(grid, kappa[conn])
        mass = element_mass(grid, weight[conn])
    else:
        stiff = tables[0][cells]
        mass = tables[1][cells]
    a_loc = assemble_matrix(stiff, local_conn, n_loc)
    s_loc = assemble_matrix(mass, local_conn, n_loc)
    return a_loc, s_loc
