"""Permeability-adapted partition of unity and the induced energy weight.

Each coarse node gets one function: inside every incident coarse cell it
solves the homogeneous flow equation with the bilinear hat trace of that
node as Dirichlet data, glued across cells by the shared trace.  The hats
sum to one on every cell boundary, so the solutions sum to one everywhere.

The energy weight is the nodal field kappa * H^2 * sum_i |grad chi_i|^2
with gradients taken at cell centers and averaged to nodes.  It serves as
the mass weight of the local spectral problems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericalError
from ..fem import element_stiffness
from ..grid import StructuredGridPair


@dataclass
class PartitionOfUnity:
    """Values of all coarse-node functions at the fine nodes (rows)."""

    values: np.ndarray

    def sum_values(self) -> np.ndarray:
        return self.values.sum(axis=0)


@dataclass
class EnergyWeight:
    """Nodal mass weight for the local spectral problems."""

    values: np.ndarray


def _patch_layout(grid: StructuredGridPair):
    """Local submesh shared by every coarse cell: connectivity, boundary
    split and the four hat traces in local numbering."""
    rx, ry = grid.rx, grid.ry
    li, lj = np.meshgrid(np.arange(rx), np.arange(ry))
    li, lj = li.ravel(), lj.ravel()
    n00 = lj * (rx + 1) + li
    conn = np.column_stack([n00, n00 + 1, n00 + rx + 2, n00 + rx + 1])

    ni, nj = np.meshgrid(np.arange(rx + 1), np.arange(ry + 1))
    ni, nj = ni.ravel(), nj.ravel()
    on_edge = (ni == 0) | (ni == rx) | (nj == 0) | (nj == ry)
    s = ni / rx
    t = nj / ry
    hats = np.column_stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
    return conn, np.flatnonzero(~on_edge), np.flatnonzero(on_edge), hats


def build_partition_of_unity(grid: StructuredGridPair, kappa: np.ndarray) -> PartitionOfUnity:
    """Solve the local hat problems on every coarse cell in one batch."""
    conn, interior, boundary, hats = _patch_layout(grid)
    n_loc = (grid.rx + 1) * (grid.ry + 1)
    n_ce = grid.n_coarse_elements

    patch_nodes = np.stack([grid.fine_nodes_of_coarse_element(e) for e in range(n_ce)])
    patch_cells = np.stack([grid.fine_cells_of_coarse_element(e) for e in range(n_ce)])

    # batched dense local stiffness: all patches share one index pattern
    kap_cells = kappa[grid.fine_elements[patch_cells]]
    local = element_stiffness(grid, kap_cells.reshape(-1, 4)).reshape(n_ce, -1, 4, 4)
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    flat_idx = rows * n_loc + cols
    mats = np.zeros((n_ce, n_loc * n_loc))
    for e in range(n_ce):
        mats[e] = np.bincount(flat_idx, weights=local[e].ravel(), minlength=n_loc * n_loc)
    mats = mats.reshape(n_ce, n_loc, n_loc)

    chi_local = np.empty((n_ce, n_loc, 4))
    chi_local[:, boundary, :] = hats[boundary]
    if interior.size:
        a_ii = mats[:, interior[:, None], interior[None, :]]
        rhs = -mats[:, interior[:, None], boundary[None, :]] @ hats[boundary]
        try:
            chi_local[:, interior, :] = np.linalg.solve(a_ii, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("partition of unity local solve failed") from exc

    values = np.zeros((grid.n_coarse_nodes, grid.n_fine_nodes))
    for e in range(n_ce):
        verts = grid.coarse_elements[e]
        for a in range(4):
            # shared edges are written repeatedly with the same trace values
            values[verts[a], patch_nodes[e]] = chi_local[e, :, a]
    return PartitionOfUnity(values=values)


def build_energy_weight(grid: StructuredGridPair, kappa: np.ndarray,
                        pu: PartitionOfUnity) -> EnergyWeight:
    """Cell-center gradient magnitudes of the partition, averaged to nodes."""
    n_fc = grid.n_fine_elements
    fi = np.arange(n_fc) % grid.nx_fine
    fj = np.arange(n_fc) // grid.nx_fine
    owner = (fj // grid.ry) * grid.nx_coarse + (fi // grid.rx)
    verts = grid.coarse_elements[owner]             # (n_fc, 4) coarse node ids
    corner = grid.fine_elements                     # (n_fc, 4) fine node ids
    vals = pu.values[verts[:, :, None], corner[:, None, :]]   # (n_fc, 4chi, 4corner)

    gx = ((vals[:, :, 1] + vals[:, :, 2]) - (vals[:, :, 0] + vals[:, :, 3])) / (2 * grid.hx)
    gy = ((vals[:, :, 3] + vals[:, :, 2]) - (vals[:, :, 0] + vals[:, :, 1])) / (2 * grid.hy)
    cell_sum = np.sum(gx ** 2 + gy ** 2, axis=1)

    accum = np.zeros(grid.n_fine_nodes)
    count = np.zeros(grid.n_fine_nodes)
    np.add.at(accum, corner.ravel(), np.repeat(cell_sum, 4))
    np.add.at(count, corner.ravel(), 1.0)
    avg = accum / np.maximum(count, 1.0)
    return EnergyWeight(values=kappa * grid.H ** 2 * avg)
