"""Generalized multiscale FEM: local spectral spaces and coarse solves."""

from .partition import EnergyWeight, PartitionOfUnity, build_energy_weight, build_partition_of_unity
from .spaces import (OfflineSpace, SnapshotSpace, build_offline_space,
                     build_snapshot_space, neighborhood_cells)
from .solver import (OnlineSpace, Realization, SpaceHierarchy, build_online_space,
                     build_space_hierarchy, evaluate_at_points, full_fine_space,
                     solve_coarse)

__all__ = [
    "EnergyWeight",
    "OfflineSpace",
    "OnlineSpace",
    "PartitionOfUnity",
    "Realization",
    "SnapshotSpace",
    "SpaceHierarchy",
    "build_energy_weight",
    "build_offline_space",
    "build_online_space",
    "build_partition_of_unity",
    "build_snapshot_space",
    "build_space_hierarchy",
    "evaluate_at_points",
    "full_fine_space",
    "neighborhood_cells",
    "solve_coarse",
]
