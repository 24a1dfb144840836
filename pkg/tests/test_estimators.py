import numpy as np
import pytest
import scipy.interpolate

from mluq.errors import ConfigurationError, DomainError, NumericalError
from mluq.estimators import (LevelPlan, allocate_samples, cost_matched_mc_samples,
                             mc_estimate, mlmc_estimate, pilot_deltas,
                             relative_l2_error)
from mluq.fem import assemble_fine, solve_fine
from mluq.gmsfem import evaluate_at_points
from mluq.randfield import PriorSampler, sample_permeability


def test_level_plan_validation():
    LevelPlan((4, 8, 16), (128, 32, 8))
    with pytest.raises(ConfigurationError):
        LevelPlan((4, 8, 8), (128, 32, 8))
    with pytest.raises(ConfigurationError):
        LevelPlan((4, 8, 16), (8, 32, 128))
    with pytest.raises(ConfigurationError):
        LevelPlan((4, 8, 16), (128, 32))
    with pytest.raises(ConfigurationError):
        LevelPlan((4, 8, 16), (128, 32, 0))


def test_mc_constant_qoi():
    est = mc_estimate(lambda eta: 3.5, 10, PriorSampler(2, seed=0))
    assert est.mean[0] == 3.5
    assert est.variance == 0.0


def test_mc_single_sample():
    sampler = PriorSampler(2, seed=5)
    est = mc_estimate(lambda eta: eta, 1, sampler)
    assert np.array_equal(est.mean, sampler.draw(0))
    assert est.variance == 0.0


def test_mc_reproducible():
    a = mc_estimate(lambda eta: eta ** 2, 25, PriorSampler(3, seed=7))
    b = mc_estimate(lambda eta: eta ** 2, 25, PriorSampler(3, seed=7))
    assert np.array_equal(a.mean, b.mean)


def test_mlmc_single_level_reduces_to_mc():
    plan = LevelPlan((4,), (12,))
    f = lambda eta: np.array([eta[0], eta[1] ** 2])
    lev = mlmc_estimate(plan, lambda eta, levels: [f(eta)], PriorSampler(2, seed=3))
    mc = mc_estimate(f, 12, PriorSampler(2, seed=3))
    assert np.array_equal(lev.estimate, mc.mean)


def test_telescoping_collapse_identical_forwards():
    plan = LevelPlan((2, 4, 8), (16, 16, 16))
    g = lambda eta: np.array([np.sin(eta[0]), eta[1]])
    forward = lambda eta, levels: [g(eta) for _ in levels]
    lev = mlmc_estimate(plan, forward, PriorSampler(2, seed=9))
    mc = mc_estimate(g, 16, PriorSampler(2, seed=9))
    assert np.array_equal(lev.level_means[1], np.zeros(2))
    assert np.array_equal(lev.level_means[2], np.zeros(2))
    diff = np.abs(lev.estimate - mc.mean).max()
    assert diff <= 1e-14 * max(1.0, np.abs(mc.mean).max())


def test_telescoping_identity():
    plan = LevelPlan((2, 4, 8), (40, 10, 5))
    forward = lambda eta, levels: [eta[: 2] * (l + 1.0) for l in levels]
    lev = mlmc_estimate(plan, forward, PriorSampler(4, seed=1))
    total = lev.level_means[0] + lev.level_means[1] + lev.level_means[2]
    assert np.abs(lev.estimate - total).max() <= 1e-14 * max(1.0, np.abs(total).max())


def test_mlmc_nested_draws_per_level():
    # level 1 correction must use exactly the first 4 draws of the stream
    plan = LevelPlan((2, 4), (8, 4))
    forward = lambda eta, levels: [(l + 1.0) * eta[0] for l in levels]
    lev = mlmc_estimate(plan, forward, PriorSampler(1, seed=42))
    draws = np.array([PriorSampler(1, seed=42).draw(m)[0] for m in range(8)])
    assert lev.level_means[0][0] == pytest.approx(draws.mean(), abs=1e-15)
    assert lev.level_means[1][0] == pytest.approx(draws[:4].mean(), abs=1e-15)


def test_forward_failure_provenance():
    def forward(eta, levels):
        if abs(eta[0]) > 0:  # every draw, deterministic trigger on index 0
            raise ValueError("synthetic breakdown")
        return [0.0]

    with pytest.raises(NumericalError, match=r"index 0.*levels \[0\]"):
        mlmc_estimate(LevelPlan((2,), (3,)), forward, PriorSampler(1, seed=2))


def test_cost_matched_samples():
    assert cost_matched_mc_samples(LevelPlan((4, 8, 16), (128, 32, 8))) == 24
    assert cost_matched_mc_samples(LevelPlan((6,), (17,))) == 17
    assert cost_matched_mc_samples(LevelPlan((2, 4), (16, 4))) == 8


def test_allocate_worked_example():
    counts = allocate_samples((0.4, 0.2, 0.1), 2, 1.0)
    assert counts[0] == 200
    assert counts[1] == 32
    assert counts[2] == 8


def test_allocate_validation():
    with pytest.raises(ConfigurationError):
        allocate_samples((0.1, 0.2, 0.4), 2, 1.0)
    with pytest.raises(ConfigurationError):
        allocate_samples((0.4, -0.2), 2, 1.0)
    with pytest.raises(ConfigurationError):
        allocate_samples((0.4, 0.2), 0, 1.0)
    with pytest.warns(RuntimeWarning, match="degenerate"):
        counts = allocate_samples((0.3, 0.3, 0.3), 4, 2.0)
    assert counts[1] == counts[2]


def test_allocate_monotone_after_rounding():
    rng = np.random.default_rng(14)
    for _ in range(20):
        deltas = np.sort(rng.uniform(0.01, 1.0, size=4))[::-1]
        counts = allocate_samples(deltas, int(rng.integers(1, 6)), rng.uniform(0, 3))
        assert np.all(np.diff(counts) <= 0)
        assert np.all(counts >= 1)


def test_relative_l2_error():
    ref = np.array([1.0, 2.0, 3.0])
    assert relative_l2_error(ref, ref) == 0.0
    assert relative_l2_error(np.zeros(3), ref) == 1.0
    err = relative_l2_error(ref * (1 + 1e-3), ref)
    assert abs(err - 1e-3) < 1e-12
    with pytest.raises(DomainError):
        relative_l2_error(ref, np.zeros(3))
    with pytest.raises(ConfigurationError):
        relative_l2_error(ref, ref[:2])
    # weighted version respects the quadrature
    w = np.array([0.25, 0.5, 0.25])
    est = ref.copy()
    est[0] += 1.0
    expected = np.sqrt(0.25) / np.sqrt(0.25 * 1 + 0.5 * 4 + 0.25 * 9)
    assert relative_l2_error(est, ref, w) == pytest.approx(expected, rel=1e-14)


def test_mlmc_error_bound_synthetic():
    """Replicated telescoped error stays under the allocation's bound.

    Toy with known per-level proxies: X = eta_0 and X_l = X + delta_l * eta_{l+1},
    so E[X_L] = 0 and the allocation for (deltas, m, E[X^2]=1) should keep the
    replicated root-mean-square estimator error below (2L + 1) delta_L / m.
    """
    deltas = (0.4, 0.2, 0.1)
    m = 2
    counts = allocate_samples(deltas, m, 1.0)
    plan = LevelPlan((2, 4, 8), tuple(counts))
    forward = lambda eta, levels: [eta[0] + deltas[l] * eta[l + 1] for l in levels]
    sq = 0.0
    reps = 300
    for r in range(reps):
        est = mlmc_estimate(plan, forward, PriorSampler(4, seed=10_000 + r))
        sq += float(est.estimate[0]) ** 2
    rmse = np.sqrt(sq / reps)
    bound = (2 * len(deltas) + 1) * deltas[-1] / m
    assert rmse < bound


def _center_pressure_interpolant():
    """One-mode response surface: center pressure as a function of eta."""
    from mluq.grid import build_grids
    from mluq.randfield import CovarianceSpec, truncated_kle

    grid = build_grids(16, 16, 4, 4)
    model = truncated_kle(grid, CovarianceSpec(sigma2=2.0, l1=0.2, l2=0.2), 1)
    nodes = np.linspace(-8.0, 8.0, 33)
    vals = []
    for t in nodes:
        k = sample_permeability(model, np.array([t]))
        u = solve_fine(assemble_fine(grid, k, source=1.0, boundary="linear"))
        vals.append(evaluate_at_points(grid, u, np.array([[0.5, 0.5]]))[0])
    return scipy.interpolate.CubicSpline(nodes, np.array(vals))


def test_mc_error_rate():
    """RMSE of the plain MC mean decays like 1/sqrt(M)."""
    spline = _center_pressure_interpolant()
    forward = lambda eta: float(spline(eta[0]))
    ref_draws = np.random.default_rng(77).standard_normal(100_000)
    reference = float(np.mean(spline(ref_draws)))
    sizes = (16, 64, 256)
    reps = 80
    rmse = []
    for m_size in sizes:
        sq = 0.0
        for r in range(reps):
            est = mc_estimate(forward, m_size, PriorSampler(1, seed=5_000 + r))
            sq += (float(est.mean[0]) - reference) ** 2
        rmse.append(np.sqrt(sq / reps))
    slope = np.polyfit(np.log(np.array(sizes, dtype=float)), np.log(rmse), 1)[0]
    assert -0.65 <= slope <= -0.35


def test_variance_decay_and_pilot_on_hierarchy(toy_hierarchy):
    grid = toy_hierarchy.grid
    forward = lambda eta, levels: toy_hierarchy.forward_fields(eta, levels)

    def fine(eta):
        return solve_fine(toy_hierarchy.realize(eta).system)

    plan = LevelPlan((2, 4, 8), (48, 48, 48))
    est = mlmc_estimate(plan, forward, PriorSampler(3, seed=6))
    assert est.level_variances[1] > est.level_variances[2]

    deltas, e_x2 = pilot_deltas(forward, fine, PriorSampler(3, seed=6), 3,
                                n_pilot=8, weights=grid.trapezoid_weights())
    assert np.all(deltas > 0)
    assert np.all(np.diff(deltas) < 0)
    assert e_x2 > 0
    counts = allocate_samples(deltas, 2, e_x2)
    LevelPlan((2, 4, 8), tuple(counts))
