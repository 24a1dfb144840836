import numpy as np
import pytest
import scipy.sparse
import scipy.sparse.linalg

from mluq.errors import ConfigurationError
from mluq.fem import assemble_fine, assemble_operator_pair, solve_fine
from mluq.gmsfem import (build_energy_weight, build_online_space,
                         build_partition_of_unity, build_snapshot_space,
                         build_space_hierarchy, evaluate_at_points, full_fine_space,
                         neighborhood_cells, solve_coarse)
from mluq.gmsfem.spaces import build_offline_space
from mluq.randfield import PriorSampler, sample_permeability


def bilinear_hats(grid):
    """Explicit tensor hat functions of the coarse nodes at fine nodes."""
    x = grid.fine_coords[:, 0]
    y = grid.fine_coords[:, 1]
    out = np.zeros((grid.n_coarse_nodes, grid.n_fine_nodes))
    for c in range(grid.n_coarse_nodes):
        cx, cy = grid.coarse_coords[c]
        out[c] = (np.maximum(0.0, 1.0 - np.abs(x - cx) / grid.H)
                  * np.maximum(0.0, 1.0 - np.abs(y - cy) / grid.H))
    return out


def classical_msfem_solution(grid, kappa, source, boundary):
    """Independent single-basis multiscale solve used as an oracle.

    Builds one harmonic hat per coarse node by per-element Dirichlet solves
    with bilinear hat traces, then a dense Galerkin solve with lifting.
    """
    system = assemble_fine(grid, kappa, source=source, boundary=boundary)
    hats = np.zeros((grid.n_fine_nodes, grid.n_coarse_nodes))
    for e in range(grid.n_coarse_elements):
        nodes = grid.fine_nodes_of_coarse_element(e)
        cells = grid.fine_cells_of_coarse_element(e)
        a_loc, _ = assemble_operator_pair(grid, cells, nodes, kappa,
                                          np.ones(grid.n_fine_nodes))
        coords = grid.fine_coords[nodes]
        x0, y0 = coords.min(axis=0)
        s = (coords[:, 0] - x0) / grid.H
        t = (coords[:, 1] - y0) / grid.H
        trace = np.column_stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
        on_edge = (np.isclose(s, 0) | np.isclose(s, 1)
                   | np.isclose(t, 0) | np.isclose(t, 1))
        inner = np.flatnonzero(~on_edge)
        edge = np.flatnonzero(on_edge)
        sol = trace.copy()
        a_ii = a_loc[inner][:, inner]
        rhs = -a_loc[inner][:, edge] @ trace[edge]
        sol[inner] = scipy.sparse.linalg.spsolve(a_ii.tocsc(), rhs)
        for a, v in enumerate(grid.coarse_elements[e]):
            hats[nodes, v] = sol[:, a]
    hats[grid.boundary_fine_nodes(), :] = 0.0
    a = system.matrix.toarray()
    a_c = hats.T @ a @ hats
    rhs = hats.T @ (system.load - a @ system.lift)
    coefs = np.linalg.solve(a_c, rhs)
    return system.lift + hats @ coefs


def test_partition_equals_hats_for_unit_permeability(toy_setup):
    grid, _, _ = toy_setup
    pu = build_partition_of_unity(grid, np.ones(grid.n_fine_nodes))
    assert np.abs(pu.values - bilinear_hats(grid)).max() < 1e-12


def test_partition_sums_to_one_on_random_fields(toy_setup):
    grid, _, model = toy_setup
    sampler = PriorSampler(3, seed=4)
    for i in range(5):
        k = sample_permeability(model, sampler.draw(i))
        pu = build_partition_of_unity(grid, k)
        assert np.abs(pu.sum_values() - 1.0).max() < 1e-12
        assert pu.values.min() > -1e-10
        assert pu.values.max() < 1.0 + 1e-10


def test_energy_weight_spot_check_unit_permeability(toy_setup):
    grid, _, _ = toy_setup
    k = np.ones(grid.n_fine_nodes)
    pu = build_partition_of_unity(grid, k)
    w = build_energy_weight(grid, k, pu)
    assert np.all(w.values >= 0.0)
    # interior fine node (3, 3) sits inside coarse cell 0; hand-compute the
    # average of sum_i |grad hat_i|^2 over its four adjacent cell centers
    node = 3 * (grid.nx_fine + 1) + 3
    expected = 0.0
    for (ci, cj) in ((2, 2), (3, 2), (2, 3), (3, 3)):
        s = (ci + 0.5) / grid.rx
        t = (cj + 0.5) / grid.ry
        expected += 2.0 * ((1 - t) ** 2 + t ** 2 + (1 - s) ** 2 + s ** 2) / grid.H ** 2
    expected = expected / 4.0 * grid.H ** 2
    assert w.values[node] == pytest.approx(expected, rel=1e-12)


def test_energy_weight_scales_with_permeability(toy_setup):
    grid, _, _ = toy_setup
    k1 = np.ones(grid.n_fine_nodes)
    k2 = 2.0 * k1
    w1 = build_energy_weight(grid, k1, build_partition_of_unity(grid, k1))
    w2 = build_energy_weight(grid, k2, build_partition_of_unity(grid, k2))
    assert np.allclose(w2.values, 2.0 * w1.values, rtol=1e-12, atol=1e-15)


def test_snapshot_space_constant_permeability(toy_setup):
    grid, nbhs, _ = toy_setup
    k = np.ones(grid.n_fine_nodes)
    weight = build_energy_weight(grid, k, build_partition_of_unity(grid, k)).values
    nbh = nbhs[6]  # interior coarse node
    snap = build_snapshot_space(grid, nbh, [(k, weight)], 4)
    assert snap.basis.shape == (nbh.fine_nodes.size, 4)
    vals = snap.eigenvalues[0]
    assert vals[0] == pytest.approx(0.0, abs=1e-8)
    assert np.all(np.diff(vals) >= -1e-12)
    # the kernel mode is the constant function
    first = snap.basis[:, 0]
    assert first.std() / np.abs(first.mean()) < 1e-6


def test_snapshot_eigen_residuals(toy_setup):
    grid, nbhs, model = toy_setup
    k = sample_permeability(model, PriorSampler(3, seed=9).draw(0))
    weight = build_energy_weight(grid, k, build_partition_of_unity(grid, k)).values
    nbh = nbhs[6]
    cells = neighborhood_cells(grid, nbh)
    a_loc, s_loc = assemble_operator_pair(grid, cells, nbh.fine_nodes, k, weight)
    snap = build_snapshot_space(grid, nbh, [(k, weight)], 4)
    a = a_loc.toarray()
    s = s_loc.toarray()
    scale = np.linalg.norm(a)
    for m in range(4):
        v = snap.basis[:, m]
        lam = snap.eigenvalues[0][m]
        assert np.linalg.norm(a @ v - lam * (s @ v)) < 1e-8 * scale


def test_offline_space_spans_snapshots_at_full_retention(toy_setup):
    grid, nbhs, _ = toy_setup
    k = np.ones(grid.n_fine_nodes)
    weight = build_energy_weight(grid, k, build_partition_of_unity(grid, k)).values
    nbh = nbhs[6]
    snap = build_snapshot_space(grid, nbh, [(k, weight)], 4)
    off = build_offline_space(grid, snap, k, weight, 4)
    assert off.dims == 4
    assert np.all(np.diff(off.eigenvalues) >= -1e-12)
    # S-orthonormality of the offline basis in the averaged mass
    cells = neighborhood_cells(grid, nbh)
    _, s_loc = assemble_operator_pair(grid, cells, nbh.fine_nodes, k, weight)
    gram = off.basis.T @ (s_loc @ off.basis)
    assert np.abs(gram - np.eye(4)).max() < 1e-8
    # every snapshot column reprojects onto the offline span
    for m in range(snap.basis.shape[1]):
        r = snap.basis[:, m]
        c = off.basis.T @ (s_loc @ r)
        resid = r - off.basis @ c
        assert np.sqrt(resid @ (s_loc @ resid)) < 1e-8 * max(1.0, np.linalg.norm(r))


def test_offline_warns_on_rank_deficiency(toy_setup):
    grid, nbhs, _ = toy_setup
    k = np.ones(grid.n_fine_nodes)
    weight = build_energy_weight(grid, k, build_partition_of_unity(grid, k)).values
    nbh = nbhs[6]
    # duplicated parameter fields make whole snapshot groups collinear
    snap = build_snapshot_space(grid, nbh, [(k, weight), (k, weight)], 4)
    with pytest.warns(RuntimeWarning, match="rank"):
        off = build_offline_space(grid, snap, k, weight, 8)
    assert off.dims == 4


def test_full_space_diagnostic_matches_fine_solve(toy_setup, toy_hierarchy):
    grid, _, model = toy_setup
    k = sample_permeability(model, PriorSampler(3, seed=2).draw(5))
    system = assemble_fine(grid, k, source=1.0, boundary="linear")
    u_fine = solve_fine(system)
    _, u_diag = solve_coarse(full_fine_space(grid), system)
    assert np.abs(u_diag - u_fine).max() < 1e-10


def test_linear_reproduction_unit_permeability(toy_setup, toy_hierarchy):
    grid, nbhs, model = toy_setup
    real = toy_hierarchy.realize(np.zeros(3))
    # eta = 0 gives k = 1; with zero source the solution is the boundary data
    system = assemble_fine(grid, np.ones(grid.n_fine_nodes), source=0.0, boundary="linear")
    op = real.online_operator(4)
    _, u = solve_coarse(op, system)
    assert np.abs(u - grid.fine_coords[:, 0]).max() < 1e-12


def test_classical_msfem_oracle_single_online_dim(toy_setup):
    grid, nbhs, model = toy_setup
    hier = build_space_hierarchy(grid, nbhs, model, level_dims=(1, 2),
                                 n_snapshot_params=2, snapshots_per_param=3,
                                 offline_dim=4, snapshot_seed=1)
    k = np.ones(grid.n_fine_nodes)
    oracle = classical_msfem_solution(grid, k, 1.0, "linear")
    real = hier.realize(np.zeros(3))
    u = real.solve(1)
    assert np.abs(u - oracle).max() < 1e-10


def test_online_nestedness(toy_setup, toy_hierarchy):
    grid, nbhs, _ = toy_setup
    real = toy_hierarchy.realize(PriorSampler(3, seed=21).draw(0))
    op2 = build_online_space(real, 2).operator.toarray()
    op4 = build_online_space(real, 4).operator.toarray()
    for i in range(len(nbhs)):
        assert np.array_equal(op4[:, 4 * i:4 * i + 2], op2[:, 2 * i:2 * i + 2])


def test_energy_error_monotone_in_online_dim(toy_setup, toy_hierarchy):
    grid, _, model = toy_setup
    sampler = PriorSampler(3, seed=33)
    for i in range(5):
        real = toy_hierarchy.realize(sampler.draw(i))
        u_fine = solve_fine(real.system)
        a = real.system.matrix
        errs = []
        for dims in (2, 4, 8):
            d = u_fine - real.solve(dims)
            errs.append(np.sqrt(d @ (a @ d)))
        assert errs[0] >= errs[1] - 1e-12
        assert errs[1] >= errs[2] - 1e-12


def test_coarse_matrix_symmetric_positive(toy_setup, toy_hierarchy):
    grid, _, _ = toy_setup
    real = toy_hierarchy.realize(PriorSampler(3, seed=8).draw(2))
    op = real.online_operator(4)
    a_c = (op.T @ (real.system.matrix @ op)).toarray()
    assert np.abs(a_c - a_c.T).max() < 1e-12 * np.abs(a_c).max()
    vals = np.linalg.eigvalsh(a_c)
    assert vals.min() > 0


def test_forward_determinism(toy_setup, toy_hierarchy):
    eta = PriorSampler(3, seed=13).draw(1)
    u1 = toy_hierarchy.forward_fields(eta, [0, 2])
    u2 = toy_hierarchy.forward_fields(eta, [0, 2])
    assert np.array_equal(u1[0], u2[0])
    assert np.array_equal(u1[1], u2[1])


def test_point_evaluation(toy_setup):
    grid, _, _ = toy_setup
    field = 2.0 * grid.fine_coords[:, 0] + 3.0 * grid.fine_coords[:, 1]
    pts = np.array([[0.25, 0.5], [0.13, 0.77], [1.0, 1.0]])
    vals = evaluate_at_points(grid, field, pts)
    assert np.allclose(vals, 2.0 * pts[:, 0] + 3.0 * pts[:, 1], atol=1e-12)
    with pytest.raises(ConfigurationError):
        evaluate_at_points(grid, field, np.array([[1.2, 0.5]]))


def test_hierarchy_validation(toy_setup):
    grid, nbhs, model = toy_setup
    with pytest.raises(ConfigurationError):
        build_space_hierarchy(grid, nbhs, model, level_dims=(4, 2))
    with pytest.raises(ConfigurationError):
        build_space_hierarchy(grid, nbhs, model, level_dims=(2, 4), offline_dim=3)
