"""Structured fine/coarse grid pairs on the unit square.

Both grids are tensor products of uniform 1D partitions.  Nodes and cells
are numbered row-major by (y, x): node (i, j) has index j * (nx + 1) + i,
cell (i, j) has index j * nx + i.  The coarse grid must divide the fine
grid so that every coarse cell is a whole block of fine cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


def _element_connectivity(nx: int, ny: int) -> np.ndarray:
    """Counter-clockwise node indices for every cell of an nx-by-ny grid."""
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i = i.ravel()
    j = j.ravel()
    n00 = j * (nx + 1) + i
    return np.column_stack([n00, n00 + 1, n00 + nx + 2, n00 + nx + 1])


def _node_coords(nx: int, ny: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, nx + 1)
    y = np.linspace(0.0, 1.0, ny + 1)
    xx, yy = np.meshgrid(x, y)
    return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass(frozen=True)
class StructuredGridPair:
    """A fine grid nested inside a coarse grid on [0, 1]^2.

    Attributes mirror the construction: counts per direction, mesh sizes
    (h fine, H coarse, taken from the x direction), node coordinates and
    cell connectivity for both grids, and the block ratios rx, ry between
    the two resolutions.  Arrays are frozen after construction.
    """

    nx_fine: int
    ny_fine: int
    nx_coarse: int
    ny_coarse: int
    h: float
    H: float
    fine_coords: np.ndarray
    coarse_coords: np.ndarray
    fine_elements: np.ndarray
    coarse_elements: np.ndarray
    rx: int
    ry: int

    @property
    def n_fine_nodes(self) -> int:
        return (self.nx_fine + 1) * (self.ny_fine + 1)

    @property
    def n_coarse_nodes(self) -> int:
        return (self.nx_coarse + 1) * (self.ny_coarse + 1)

    @property
    def n_fine_elements(self) -> int:
        return self.nx_fine * self.ny_fine

    @property
    def n_coarse_elements(self) -> int:
        return self.nx_coarse * self.ny_coarse

    @property
    def hx(self) -> float:
        return 1.0 / self.nx_fine

    @property
    def hy(self) -> float:
        return 1.0 / self.ny_fine

    def boundary_fine_nodes(self) -> np.ndarray:
        """Indices of fine nodes on the boundary of the unit square."""
        nx, ny = self.nx_fine, self.ny_fine
        i, j = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
        on_edge = (i == 0) | (i == nx) | (j == 0) | (j == ny)
        return np.flatnonzero(on_edge.ravel())

    def interior_fine_nodes(self) -> np.ndarray:
        nx, ny = self.nx_fine, self.ny_fine
        i, j = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
        inside = (i > 0) & (i < nx) & (j > 0) & (j < ny)
        return np.flatnonzero(inside.ravel())

    def fine_cells_of_coarse_element(self, ce: int) -> np.ndarray:
        """Fine cell indices covered by coarse cell ce, row-major block."""
        ci, cj = ce % self.nx_coarse, ce // self.nx_coarse
        fi = np.arange(ci * self.rx, (ci + 1) * self.rx)
        fj = np.arange(cj * self.ry, (cj + 1) * self.ry)
        ii, jj = np.meshgrid(fi, fj)
        return (jj * self.nx_fine + ii).ravel()

    def fine_nodes_of_coarse_element(self, ce: int) -> np.ndarray:
        """Fine node indices in the closure of coarse cell ce (sorted)."""
        ci, cj = ce % self.nx_coarse, ce // self.nx_coarse
        fi = np.arange(ci * self.rx, (ci + 1) * self.rx + 1)
        fj = np.arange(cj * self.ry, (cj + 1) * self.ry + 1)
        ii, jj = np.meshgrid(fi, fj)
        return np.sort((jj * (self.nx_fine + 1) + ii).ravel())

    def trapezoid_weights(self) -> np.ndarray:
        """Nodal quadrature weights of the tensor trapezoidal rule."""
        wx = np.full(self.nx_fine + 1, self.hx)
        wx[[0, -1]] = 0.5 * self.hx
        wy = np.full(self.ny_fine + 1, self.hy)
        wy[[0, -1]] = 0.5 * self.hy
        return np.outer(wy, wx).ravel()


@dataclass(frozen=True)
class Neighborhood:
    """Union of the coarse cells sharing one coarse node.

    fine_nodes is sorted; interior_mask flags the entries strictly inside
    the union (off its outline), aligned with fine_nodes.
    """

    coarse_node: int
    coarse_elements: np.ndarray
    fine_nodes: np.ndarray
    interior_mask: np.ndarray = field(repr=False)


def build_grids(nx_fine: int, ny_fine: int, nx_coarse: int, ny_coarse: int) -> StructuredGridPair:
    """Construct a nested grid pair, checking divisibility per direction."""
    for n, name in ((nx_fine, "nx_fine"), (ny_fine, "ny_fine"),
                    (nx_coarse, "nx_coarse"), (ny_coarse, "ny_coarse")):
        if int(n) != n or n < 1:
            raise ConfigurationError(f"{name} must be a positive integer, got {n!r}")
    if nx_fine % nx_coarse != 0:
        raise ConfigurationError(
            f"fine grid does not divide evenly: nx_fine={nx_fine} vs nx_coarse={nx_coarse}")
    if ny_fine % ny_coarse != 0:
        raise ConfigurationError(
            f"fine grid does not divide evenly: ny_fine={ny_fine} vs ny_coarse={ny_coarse}")

    grid = StructuredGridPair(
        nx_fine=nx_fine,
        ny_fine=ny_fine,
        nx_coarse=nx_coarse,
        ny_coarse=ny_coarse,
        h=1.0 / nx_fine,
        H=1.0 / nx_coarse,
        fine_coords=_node_coords(nx_fine, ny_fine),
        coarse_coords=_node_coords(nx_coarse, ny_coarse),
        fine_elements=_element_connectivity(nx_fine, ny_fine),
        coarse_elements=_element_connectivity(nx_coarse, ny_coarse),
        rx=nx_fine // nx_coarse,
        ry=ny_fine // ny_coarse,
    )
    for arr in (grid.fine_coords, grid.coarse_coords, grid.fine_elements, grid.coarse_elements):
        arr.flags.writeable = False
    return grid


def build_neighborhoods(grid: StructuredGridPair) -> list[Neighborhood]:
    """One neighborhood per coarse node, in coarse node order."""
    nxc, nyc = grid.nx_coarse, grid.ny_coarse
    out = []
    for cj in range(nyc + 1):
        for ci in range(nxc + 1):
            node = cj * (nxc + 1) + ci
            elems = []
            for ej in (cj - 1, cj):
                for ei in (ci - 1, ci):
                    if 0 <= ei < nxc and 0 <= ej < nyc:
                        elems.append(ej * nxc + ei)
            elems = np.asarray(sorted(elems), dtype=int)
            nodes = np.unique(np.concatenate(
                [grid.fine_nodes_of_coarse_element(e) for e in elems]))
            # the union of cells incident to one node is a rectangle, so the
            # outline test reduces to the bounding box
            xi = nodes % (grid.nx_fine + 1)
            yj = nodes // (grid.nx_fine + 1)
            interior = ((xi > xi.min()) & (xi < xi.max())
                        & (yj > yj.min()) & (yj < yj.max()))
            nodes.flags.writeable = False
            interior.flags.writeable = False
            elems.flags.writeable = False
            out.append(Neighborhood(
                coarse_node=node,
                coarse_elements=elems,
                fine_nodes=nodes,
                interior_mask=interior,
            ))
    return out
