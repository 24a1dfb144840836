"""Snapshot and offline spaces on coarse-node neighborhoods.

Snapshots are the lowest Neumann eigenfunctions of the local pencil
(stiffness with kappa, mass with the energy weight) for each parameter
sample.  The offline space compresses the pooled snapshots through the
same pencil assembled with parameter-averaged coefficients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

from ..errors import NumericalError
from ..fem import assemble_operator_pair, generalized_symmetric_eig
from ..grid import Neighborhood, StructuredGridPair

_MASS_FLOOR = 1e-12
_RANK_TOL = 1e-10


def neighborhood_cells(grid: StructuredGridPair, nbh: Neighborhood) -> np.ndarray:
    """Fine cells covered by a neighborhood, sorted."""
    return np.sort(np.concatenate(
        [grid.fine_cells_of_coarse_element(e) for e in nbh.coarse_elements]))


def _floored(s_loc):
    """Relative diagonal shift keeping the mass factor positive definite."""
    n = s_loc.shape[0]
    shift = _MASS_FLOOR * (s_loc.diagonal().sum() / n)
    return s_loc + shift * scipy.sparse.identity(n, format="csr") \
        if scipy.sparse.issparse(s_loc) else s_loc + shift * np.eye(n)


@dataclass
class SnapshotSpace:
    """Pooled local eigenfunctions over the parameter samples.

    basis columns are grouped by parameter sample, each group holding
    n_per_param vectors normalized in its own mass factor; eigenvalues
    stores the matching groups of pencil eigenvalues.
    """

    neighborhood: Neighborhood
    basis: np.ndarray
    eigenvalues: list[np.ndarray]
    n_per_param: int

    @property
    def n_params(self) -> int:
        return len(self.eigenvalues)


@dataclass
class OfflineSpace:
    """Compressed local basis with its averaged-pencil eigenvalues."""

    neighborhood: Neighborhood
    basis: np.ndarray
    eigenvalues: np.ndarray

    @property
    def dims(self) -> int:
        return self.basis.shape[1]


def build_snapshot_space(grid: StructuredGridPair, nbh: Neighborhood,
                         coefficient_fields: list[tuple[np.ndarray, np.ndarray]],
                         n_per_param: int) -> SnapshotSpace:
    """Lowest local eigenfunctions for each (kappa, weight) field pair."""
    cells = neighborhood_cells(grid, nbh)
    nodes = nbh.fine_nodes
    columns = []
    values = []
    for j, (kappa, weight) in enumerate(coefficient_fields):
        a_loc, s_loc = assemble_operator_pair(grid, cells, nodes, kappa, weight)
        try:
            art = generalized_symmetric_eig(a_loc, _floored(s_loc), n_per_param)
        except NumericalError as exc:
            raise NumericalError(
                f"snapshot eigensolve failed on neighborhood {nbh.coarse_node}, "
                f"parameter sample {j}") from exc
        columns.append(art.vectors)
        values.append(art.values)
    return SnapshotSpace(neighborhood=nbh, basis=np.hstack(columns),
                         eigenvalues=values, n_per_param=n_per_param)


def build_offline_space(grid: StructuredGridPair, snapshot: SnapshotSpace,
                        kappa_bar: np.ndarray, weight_bar: np.ndarray,
                        n_offline: int) -> OfflineSpace:
    """Averaged-coefficient eigenproblem restricted to the snapshot span.

    The projected mass factor is rank-deficient whenever snapshot groups
    share directions (the constant mode appears once per parameter), so the
    pencil is solved after spectral whitening: directions of the projected
    mass below a relative tolerance are dropped, with a warning if that
    leaves fewer than n_offline vectors.
    """
    nbh = snapshot.neighborhood
    cells = neighborhood_cells(grid, nbh)
    r_snap = snapshot.basis
    a_loc, s_loc = assemble_operator_pair(grid, cells, nbh.fine_nodes, kappa_bar, weight_bar)
    s_loc = _floored(s_loc)
    a_off = r_snap.T @ (a_loc @ r_snap)
    s_off = r_snap.T @ (s_loc @ r_snap)
    a_off = 0.5 * (a_off + a_off.T)
    s_off = 0.5 * (s_off + s_off.T)

    w, v = scipy.linalg.eigh(s_off)
    keep = w > _RANK_TOL * w[-1]
    rank = int(np.count_nonzero(keep))
    if rank == 0:
        raise NumericalError(
            f"projected mass factor has no usable directions on neighborhood "
            f"{nbh.coarse_node}")
    white = v[:, keep] / np.sqrt(w[keep])
    a_white = white.T @ a_off @ white
    a_white = 0.5 * (a_white + a_white.T)
    vals, vecs = scipy.linalg.eigh(a_white)

    m = min(n_offline, rank)
    if m < n_offline:
        warnings.warn(
            f"neighborhood {nbh.coarse_node}: snapshot span has rank {rank}, "
            f"returning {m} offline vectors instead of {n_offline}",
            RuntimeWarning, stacklevel=2)
    basis = r_snap @ (white @ vecs[:, :m])
    lead = np.argmax(np.abs(basis), axis=0)
    flip = basis[lead, np.arange(m)] < 0.0
    basis[:, flip] *= -1.0
    return OfflineSpace(neighborhood=nbh, basis=basis, eigenvalues=vals[:m].copy())
