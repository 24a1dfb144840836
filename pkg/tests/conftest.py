import pytest

from mluq.gmsfem import build_space_hierarchy
from mluq.grid import build_grids, build_neighborhoods
from mluq.randfield import CovarianceSpec, truncated_kle


@pytest.fixture(scope="session")
def toy_setup():
    """Small grid pair with a 3-mode expansion, shared across modules."""
    grid = build_grids(20, 20, 4, 4)
    nbhs = build_neighborhoods(grid)
    spec = CovarianceSpec(sigma2=1.0, l1=0.2, l2=0.2)
    model = truncated_kle(grid, spec, 3)
    return grid, nbhs, model


@pytest.fixture(scope="session")
def toy_hierarchy(toy_setup):
    grid, nbhs, model = toy_setup
    return build_space_hierarchy(grid, nbhs, model, level_dims=(2, 4, 8),
                                 n_snapshot_params=3, snapshots_per_param=4,
                                 offline_dim=8, snapshot_seed=11)
