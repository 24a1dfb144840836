"""Online spaces, coarse solves, and the level hierarchy of forward models.

A level is an online dimension: per neighborhood, the lowest eigenvectors
of the parameter-specific pencil projected on the offline basis, multiplied
by the partition of unity.  Per parameter sample the projected pencil is
diagonalized once at full offline dimension and sliced per level, which
makes the level spaces nested by construction and lets every level of one
sample share all of the expensive local work.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from ..errors import ConfigurationError, NumericalError
from ..fem import (BoundaryData, FineSystem, SourceData, assemble_fine,
                   assemble_operator_pair, element_mass, element_stiffness)
from ..grid import Neighborhood, StructuredGridPair
from ..randfield import KLModel, PriorSampler, sample_permeability
from .partition import build_energy_weight, build_partition_of_unity
from .spaces import (OfflineSpace, build_offline_space, build_snapshot_space,
                     neighborhood_cells)

_MASS_FLOOR = 1e-12


@dataclass
class OnlineSpace:
    """Global coarse basis at one online dimension.

    operator maps coarse coefficients to fine nodal values; its rows are
    zeroed on the Dirichlet boundary so the coarse space carries only the
    lifted part of the solution.  Columns are grouped by coarse node.
    """

    dims: int
    operator: scipy.sparse.csc_matrix
    eigenvalues: list[np.ndarray]

    @property
    def n_columns(self) -> int:
        return self.operator.shape[1]


def evaluate_at_points(grid: StructuredGridPair, values: np.ndarray,
                       points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a fine nodal field at interior points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise ConfigurationError("evaluation points must lie in the unit square")
    ix = np.minimum((pts[:, 0] / grid.hx).astype(int), grid.nx_fine - 1)
    jy = np.minimum((pts[:, 1] / grid.hy).astype(int), grid.ny_fine - 1)
    s = pts[:, 0] / grid.hx - ix
    t = pts[:, 1] / grid.hy - jy
    n00 = jy * (grid.nx_fine + 1) + ix
    v00 = values[n00]
    v10 = values[n00 + 1]
    v01 = values[n00 + grid.nx_fine + 1]
    v11 = values[n00 + grid.nx_fine + 2]
    return (v00 * (1 - s) * (1 - t) + v10 * s * (1 - t)
            + v01 * (1 - s) * t + v11 * s * t)


def solve_coarse(operator: scipy.sparse.spmatrix, system: FineSystem):
    """Galerkin solve in the span of the operator columns, with lifting.

    Returns (coarse coefficients, fine nodal solution).  The right-hand
    side is assembled against the lifted load F - A g, so the coarse space
    only has to represent the zero-boundary part of the solution.
    """
    a = system.matrix
    a_r = a @ operator
    a_c = (operator.T @ a_r).toarray() if scipy.sparse.issparse(a_r) \
        else operator.T @ a_r
    a_c = 0.5 * (a_c + a_c.T)
    rhs = operator.T @ (system.load - a @ system.lift)
    rhs = np.asarray(rhs).ravel()
    try:
        factor = scipy.linalg.cho_factor(a_c)
        coefs = scipy.linalg.cho_solve(factor, rhs)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError("coarse matrix is singular or indefinite") from exc
    fine = system.lift + operator @ coefs
    return coefs, np.asarray(fine).ravel()


def full_fine_space(grid: StructuredGridPair) -> scipy.sparse.csc_matrix:
    """Diagnostic operator whose span is the whole interior fine space."""
    interior = grid.interior_fine_nodes()
    n = grid.n_fine_nodes
    data = np.ones(interior.size)
    return scipy.sparse.csc_matrix(
        (data, (interior, np.arange(interior.size))), shape=(n, interior.size))


@dataclass
class SpaceHierarchy:
    """Frozen offline stage shared by every forward evaluation.

    Holds the grids, the random field model, the per-neighborhood offline
    bases, the averaged coefficient fields they came from, and the forward
    problem data (source and boundary).  level_dims lists the online
    dimensions, coarsest first.
    """

    grid: StructuredGridPair
    neighborhoods: list[Neighborhood]
    kl_model: KLModel
    offline: list[OfflineSpace]
    kappa_bar: np.ndarray
    weight_bar: np.ndarray
    level_dims: tuple[int, ...]
    snapshot_seed: int
    n_snapshot_params: int
    snapshots_per_param: int
    offline_dim: int
    source: SourceData = 1.0
    boundary: BoundaryData = "linear"
    _cells: list[np.ndarray] = field(default_factory=list, repr=False)
    _interior_masks: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self._cells:
            self._cells = [neighborhood_cells(self.grid, n) for n in self.neighborhoods]
        if not self._interior_masks:
            on_boundary = np.zeros(self.grid.n_fine_nodes, dtype=bool)
            on_boundary[self.grid.boundary_fine_nodes()] = True
            self._interior_masks = [~on_boundary[n.fine_nodes] for n in self.neighborhoods]

    @property
    def n_levels(self) -> int:
        return len(self.level_dims)

    def max_offline_dim(self) -> int:
        return max(space.dims for space in self.offline)

    def realize(self, eta: np.ndarray) -> "Realization":
        return Realization(self, np.asarray(eta, dtype=float))

    def forward_fields(self, eta: np.ndarray, levels) -> list[np.ndarray]:
        """Fine nodal pressures for the given level indices, shared work."""
        real = self.realize(eta)
        levels = list(levels)
        if levels:
            real.prepare(max(self.level_dims[l] for l in levels))
        return [real.solve(self.level_dims[l]) for l in levels]

    def forward_points(self, eta: np.ndarray, levels, points: np.ndarray) -> list[np.ndarray]:
        real = self.realize(eta)
        levels = list(levels)
        if levels:
            real.prepare(max(self.level_dims[l] for l in levels))
        return [evaluate_at_points(self.grid, real.solve(self.level_dims[l]), points)
                for l in levels]

    def point_evaluator(self, points: np.ndarray, cache_size: int = 4):
        """Per-level point forward (eta, level_index) with realization reuse."""
        return _PointEvaluator(self, np.asarray(points, dtype=float), cache_size)


@dataclass
class _GalerkinProducts:
    """Cached coarse-space products of one realization, at one dimension.

    Because the level operators are column-nested, the coarse matrix and
    right-hand side of any smaller dimension are plain subsets of these,
    selected by taking the leading columns of every neighborhood block.
    """

    dims: int
    operator: scipy.sparse.csc_matrix
    gram: np.ndarray
    rhs: np.ndarray
    widths: np.ndarray
    offsets: np.ndarray

    def column_subset(self, dims: int) -> np.ndarray | None:
        if dims == self.dims:
            return None
        takes = np.minimum(dims, self.widths)
        return np.concatenate([np.arange(o, o + t)
                               for o, t in zip(self.offsets[:-1], takes)])


class Realization:
    """All per-parameter forward state, computed lazily and cached.

    The shared stage (permeability, partition of unity, energy weight, fine
    operators, projected local pencils) runs once; each online dimension
    then costs one small dense solve plus the basis assembly.
    """

    def __init__(self, hierarchy: SpaceHierarchy, eta: np.ndarray):
        self.hierarchy = hierarchy
        self.eta = eta
        h = hierarchy
        self.kappa = sample_permeability(h.kl_model, eta)
        self.pu = build_partition_of_unity(h.grid, self.kappa)
        self.weight = build_energy_weight(h.grid, self.kappa, self.pu).values
        self.system = assemble_fine(h.grid, self.kappa, h.source, h.boundary)
        self._local_basis: list[np.ndarray] | None = None
        self._local_values: list[np.ndarray] | None = None
        self._solutions: dict[int, np.ndarray] = {}
        self._operators: dict[int, scipy.sparse.csc_matrix] = {}
        self._products: _GalerkinProducts | None = None

    def _project_locals(self):
        if self._local_basis is not None:
            return
        h = self.hierarchy
        conn = h.grid.fine_elements
        tables = (element_stiffness(h.grid, self.kappa[conn]),
                  element_mass(h.grid, self.weight[conn]))
        basis = []
        values = []
        for nbh, cells, offline in zip(h.neighborhoods, h._cells, h.offline):
            a_loc, s_loc = assemble_operator_pair(
                h.grid, cells, nbh.fine_nodes, self.kappa, self.weight, tables)
            r_off = offline.basis
            a_on = r_off.T @ (a_loc @ r_off)
            s_on = r_off.T @ (s_loc @ r_off)
            a_on = 0.5 * (a_on + a_on.T)
            s_on = 0.5 * (s_on + s_on.T)
            s_on += _MASS_FLOOR * (np.trace(s_on) / s_on.shape[0]) * np.eye(s_on.shape[0])
            try:
                vals, vecs = scipy.linalg.eigh(a_on, s_on)
            except scipy.linalg.LinAlgError as exc:
                raise NumericalError(
                    f"online eigensolve failed on neighborhood {nbh.coarse_node}") from exc
            fine = r_off @ vecs
            lead = np.argmax(np.abs(fine), axis=0)
            flip = fine[lead, np.arange(fine.shape[1])] < 0.0
            fine[:, flip] *= -1.0
            basis.append(fine)
            values.append(vals)
        self._local_basis = basis
        self._local_values = values

    def online_operator(self, dims: int) -> scipy.sparse.csc_matrix:
        """Global coarse-to-fine operator at one online dimension."""
        if dims in self._operators:
            return self._operators[dims]
        h = self.hierarchy
        if dims < 1 or dims > h.max_offline_dim():
            raise ConfigurationError(
                f"online dimension {dims} outside [1, {h.max_offline_dim()}]")
        self._project_locals()
        rows = []
        cols = []
        data = []
        col0 = 0
        for i, nbh in enumerate(h.neighborhoods):
            take = min(dims, self._local_basis[i].shape[1])
            chi = self.pu.values[nbh.coarse_node, nbh.fine_nodes]
            block = self._local_basis[i][:, :take] * chi[:, None]
            block = block * h._interior_masks[i][:, None]
            rows.append(np.repeat(nbh.fine_nodes, take))
            cols.append(np.tile(np.arange(col0, col0 + take), nbh.fine_nodes.size))
            data.append(block.ravel())
            col0 += take
        op = scipy.sparse.csc_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(h.grid.n_fine_nodes, col0))
        self._operators[dims] = op
        return op

    def online_eigenvalues(self, dims: int) -> list[np.ndarray]:
        self._project_locals()
        return [v[:dims].copy() for v in self._local_values]

    def prepare(self, dims: int) -> None:
        """Warm the Galerkin product cache up to one online dimension.

        Solves at any dimension <= dims then reduce to slicing the cached
        coarse matrix, which is what makes a multi-level forward call cost
        little more than its finest level alone.
        """
        self._ensure_products(dims)

    def _ensure_products(self, dims: int) -> _GalerkinProducts:
        prod = self._products
        if prod is not None and prod.dims >= dims:
            return prod
        op = self.online_operator(dims)
        a = self.system.matrix
        a_r = a @ op
        gram = (op.T @ a_r).toarray()
        gram = 0.5 * (gram + gram.T)
        rhs = np.asarray(op.T @ (self.system.load - a @ self.system.lift)).ravel()
        widths = np.array([b.shape[1] for b in self._local_basis])
        takes = np.minimum(dims, widths)
        offsets = np.concatenate(([0], np.cumsum(takes)))
        self._products = _GalerkinProducts(dims, op, gram, rhs, widths, offsets)
        return self._products

    def solve(self, dims: int) -> np.ndarray:
        """Fine nodal pressure of the coarse solve at one online dimension."""
        if dims in self._solutions:
            return self._solutions[dims]
        prod = self._ensure_products(dims)
        sel = prod.column_subset(dims)
        if sel is None:
            a_c, rhs = prod.gram, prod.rhs
        else:
            a_c = prod.gram[np.ix_(sel, sel)]
            rhs = prod.rhs[sel]
        try:
            factor = scipy.linalg.cho_factor(a_c)
            coefs = scipy.linalg.cho_solve(factor, rhs)
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError("coarse matrix is singular or indefinite") from exc
        if sel is not None:
            padded = np.zeros(prod.gram.shape[0])
            padded[sel] = coefs
            coefs = padded
        fine = self.system.lift + prod.operator @ coefs
        self._solutions[dims] = np.asarray(fine).ravel()
        return self._solutions[dims]

    def qoi(self, dims: int, points: np.ndarray | None = None) -> np.ndarray:
        u = self.solve(dims)
        if points is None:
            return u
        return evaluate_at_points(self.hierarchy.grid, u, points)


class _PointEvaluator:
    """Callable (eta, level_index) -> point values, reusing realizations."""

    def __init__(self, hierarchy: SpaceHierarchy, points: np.ndarray, cache_size: int):
        self.hierarchy = hierarchy
        self.points = points
        self.cache_size = cache_size
        self._cache: dict[bytes, Realization] = {}

    def __call__(self, eta: np.ndarray, level_index: int) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        key = eta.tobytes()
        real = self._cache.get(key)
        if real is None:
            real = self.hierarchy.realize(eta)
            self._cache[key] = real
            while len(self._cache) > self.cache_size:
                self._cache.pop(next(iter(self._cache)))
        return real.qoi(self.hierarchy.level_dims[level_index], self.points)


def build_online_space(realization: Realization, dims: int) -> OnlineSpace:
    """Materialize the online space of one realization at one dimension."""
    op = realization.online_operator(dims)
    return OnlineSpace(dims=dims, operator=op,
                       eigenvalues=realization.online_eigenvalues(dims))


def build_space_hierarchy(grid: StructuredGridPair, neighborhoods: list[Neighborhood],
                          kl_model: KLModel, *, level_dims=(4, 8, 16),
                          n_snapshot_params: int = 10, snapshots_per_param: int = 10,
                          offline_dim: int = 32, snapshot_seed: int = 0,
                          source: SourceData = 1.0,
                          boundary: BoundaryData = "linear") -> SpaceHierarchy:
    """Run the full offline stage: snapshots, averaging, compression."""
    dims = tuple(int(d) for d in level_dims)
    if not dims or any(d < 1 for d in dims):
        raise ConfigurationError(f"level dimensions must be positive, got {dims}")
    if list(dims) != sorted(set(dims)):
        raise ConfigurationError(f"level dimensions must be strictly increasing, got {dims}")
    if dims[-1] > offline_dim:
        raise ConfigurationError(
            f"finest online dimension {dims[-1]} exceeds offline dimension {offline_dim}")
    if n_snapshot_params < 1 or snapshots_per_param < 1:
        raise ConfigurationError("snapshot counts must be positive")

    sampler = PriorSampler(kl_model.n_modes, snapshot_seed)
    fields = []
    kappa_sum = np.zeros(grid.n_fine_nodes)
    for j in range(n_snapshot_params):
        kappa_j = sample_permeability(kl_model, sampler.draw(j))
        pu_j = build_partition_of_unity(grid, kappa_j)
        weight_j = build_energy_weight(grid, kappa_j, pu_j).values
        fields.append((kappa_j, weight_j))
        kappa_sum += kappa_j
    kappa_bar = kappa_sum / n_snapshot_params
    pu_bar = build_partition_of_unity(grid, kappa_bar)
    weight_bar = build_energy_weight(grid, kappa_bar, pu_bar).values

    offline = []
    for nbh in neighborhoods:
        snap = build_snapshot_space(grid, nbh, fields, snapshots_per_param)
        offline.append(build_offline_space(grid, snap, kappa_bar, weight_bar, offline_dim))

    return SpaceHierarchy(
        grid=grid, neighborhoods=neighborhoods, kl_model=kl_model, offline=offline,
        kappa_bar=kappa_bar, weight_bar=weight_bar, level_dims=dims,
        snapshot_seed=snapshot_seed, n_snapshot_params=n_snapshot_params,
        snapshots_per_param=snapshots_per_param, offline_dim=offline_dim,
        source=source, boundary=boundary)
