import numpy as np
import pytest

from mluq.errors import ConfigurationError
from mluq.grid import build_grids
from mluq.randfield import (CovarianceSpec, PriorSampler, assemble_covariance,
                            covariance_trace, energy_ratio, log_field,
                            sample_permeability, truncated_kle)


@pytest.fixture(scope="module")
def grid20():
    return build_grids(20, 20, 2, 2)


def test_covariance_entries(grid20):
    spec = CovarianceSpec(sigma2=2.0, l1=0.1, l2=0.1)
    c = assemble_covariance(grid20, spec)
    assert np.allclose(np.diag(c), 2.0)
    # nodes (0,0) and (0.1, 0): separation of one correlation length
    n0 = 0
    n1 = 2  # 0.1 = 2 * h with h = 0.05
    assert c[n0, n1] == pytest.approx(2.0 * np.exp(-0.5), rel=1e-12)
    # decay along an axis is monotone
    row = c[0, :21]
    assert np.all(np.diff(row) < 0)


def test_covariance_anisotropy(grid20):
    spec = CovarianceSpec(sigma2=1.0, l1=0.1, l2=0.05)
    c = assemble_covariance(grid20, spec)
    dx = c[0, 1]            # shift h in x
    dy = c[0, 21]           # shift h in y
    assert dy < dx


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        CovarianceSpec(sigma2=-1.0, l1=0.1, l2=0.1)
    with pytest.raises(ConfigurationError):
        CovarianceSpec(sigma2=1.0, l1=0.0, l2=0.1)


def test_trace_identity(grid20):
    spec = CovarianceSpec(sigma2=2.0, l1=0.1, l2=0.1)
    n = grid20.n_fine_nodes
    model = truncated_kle(grid20, spec, n)
    assert model.eigenvalues.sum() == pytest.approx(
        covariance_trace(grid20, spec), abs=1e-8)


def test_orthonormality_and_psd(grid20):
    spec = CovarianceSpec(sigma2=2.0, l1=0.1, l2=0.1)
    model = truncated_kle(grid20, spec, 8)
    gram = model.eigenfunctions.T @ (model.weights[:, None] * model.eigenfunctions)
    assert np.abs(gram - np.eye(8)).max() < 1e-10
    assert np.all(model.eigenvalues >= 0)
    assert np.all(np.diff(model.eigenvalues) <= 1e-12)


def test_truncated_pointwise_variance_bounded(grid20):
    spec = CovarianceSpec(sigma2=2.0, l1=0.15, l2=0.15)
    model = truncated_kle(grid20, spec, 12)
    diag = np.sum(model.eigenvalues * model.eigenfunctions ** 2, axis=1)
    assert diag.max() <= spec.sigma2 + 1e-8


def test_energy_ratio_limits(grid20):
    spec = CovarianceSpec(sigma2=1.5, l1=0.2, l2=0.2)
    tr = covariance_trace(grid20, spec)
    full = truncated_kle(grid20, spec, grid20.n_fine_nodes)
    assert energy_ratio(full, tr) == pytest.approx(1.0, abs=1e-8)
    few = truncated_kle(grid20, spec, 5)
    r = energy_ratio(few, tr)
    assert 0.0 < r < 1.0 + 1e-12


def test_zero_variance_gives_unit_permeability(grid20):
    spec = CovarianceSpec(sigma2=0.0, l1=0.1, l2=0.1)
    model = truncated_kle(grid20, spec, 3)
    assert np.all(model.eigenvalues == 0.0)
    k = sample_permeability(model, np.array([1.0, -2.0, 0.5]))
    assert np.all(k == 1.0)


def test_field_linearity_in_coefficients(grid20):
    spec = CovarianceSpec(sigma2=2.0, l1=0.1, l2=0.1)
    model = truncated_kle(grid20, spec, 5)
    eta = np.array([0.3, -1.2, 0.7, 0.1, -0.4])
    assert np.allclose(log_field(model, 2.0 * eta), 2.0 * log_field(model, eta),
                       rtol=0, atol=1e-13)
    assert np.all(sample_permeability(model, np.zeros(5)) == 1.0)


def test_field_variance_matches_spectrum(grid20):
    # pointwise variance of the log field equals the truncated diagonal
    spec = CovarianceSpec(sigma2=2.0, l1=0.1, l2=0.1)
    model = truncated_kle(grid20, spec, 5)
    rng = np.random.default_rng(7)
    nodes = rng.choice(grid20.n_fine_nodes, size=10, replace=False)
    draws = rng.standard_normal((10000, 5))
    vals = (np.sqrt(model.eigenvalues) * draws) @ model.eigenfunctions[nodes].T
    target = np.sum(model.eigenvalues * model.eigenfunctions[nodes] ** 2, axis=1)
    assert np.allclose(vals.var(axis=0, ddof=1), target, rtol=0.05)


def test_prior_sampler_reproducible_and_independent():
    s = PriorSampler(5, seed=42)
    a = s.draw(3)
    b = PriorSampler(5, seed=42).draw(3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, s.draw(4))
    assert not np.array_equal(a, PriorSampler(5, seed=42, tag=1).draw(3))

    draws = np.stack([s.draw(i) for i in range(100000)])
    assert np.abs(draws.mean(axis=0)).max() < 0.02
    assert np.abs(draws.var(axis=0) - 1.0).max() < 0.02
    # successive indices are uncorrelated
    lag = np.corrcoef(draws[:-1, 0], draws[1:, 0])[0, 1]
    assert abs(lag) < 0.02
    # components within a draw are uncorrelated
    cross = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
    assert abs(cross) < 0.02
