"""Monte Carlo and multilevel Monte Carlo estimators over the prior.

The multilevel estimator telescopes a quantity of interest across a
hierarchy of forward models: many samples on cheap coarse levels, few on
the expensive fine ones.  Sample draws are keyed by index only, so the
draws used at different levels are nested by construction.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, NumericalError

__all__ = [
    "LevelPlan", "LevelEstimate", "McEstimate", "mc_estimate", "mlmc_estimate",
    "cost_matched_mc_samples", "allocate_samples", "relative_l2_error",
    "pilot_deltas",
]


def _rms(x):
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(np.square(x))))


@dataclass(frozen=True)
class LevelPlan:
    """Online dimensions and sample counts per level.

    Cost of one sample at a level is modeled as the square of its online
    dimension (dense factorization of the coarse matrix dominates).
    """

    dims: tuple
    samples: tuple

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "samples", tuple(int(m) for m in self.samples))
        if len(self.dims) != len(self.samples) or not self.dims:
            raise ConfigurationError(
                "level plan needs matching nonempty dims and samples, got "
                f"{self.dims} and {self.samples}")
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ConfigurationError(
                f"online dimensions must be strictly increasing, got {self.dims}")
        if any(m < 1 for m in self.samples):
            raise ConfigurationError(f"sample counts must be >= 1, got {self.samples}")
        if any(b > a for a, b in zip(self.samples, self.samples[1:])):
            raise ConfigurationError(
                f"sample counts must be nonincreasing, got {self.samples}")

    @property
    def n_levels(self):
        return len(self.dims)

    def cost_units(self):
        """Per-level cost in units of finest-level-sample-equivalents x dims^2."""
        return tuple(d * d * m for d, m in zip(self.dims, self.samples))


@dataclass(frozen=True)
class McEstimate:
    mean: np.ndarray
    variance: float
    n_samples: int


@dataclass(frozen=True)
class LevelEstimate:
    """Per-level correction statistics and the combined telescoped estimate."""

    level_means: list
    level_variances: np.ndarray
    samples: tuple
    estimate: np.ndarray = field(init=False)

    def __post_init__(self):
        total = self.level_means[0].copy()
        for m in self.level_means[1:]:
            total += m
        object.__setattr__(self, "estimate", total)


def mc_estimate(forward, n_samples, sampler, *, norm=_rms, workers=1):
    """Arithmetic mean of ``forward(eta)`` over ``n_samples`` prior draws.

    The variance reported is the sample variance of ``norm`` deviations
    from the mean (zero for a single sample).
    """
    if n_samples < 1:
        raise ConfigurationError(f"n_samples must be >= 1, got {n_samples}")

    def one(m):
        try:
            return np.atleast_1d(np.asarray(forward(sampler.draw(m)), dtype=float))
        except (ConfigurationError, DomainError):
            raise
        except Exception as exc:
            raise NumericalError(
                f"forward evaluation failed for sample index {m} "
                f"(prior seed {sampler.seed})") from exc

    values = _map_indexed(one, n_samples, workers)
    stack = np.stack(values)
    mean = stack.mean(axis=0)
    if n_samples > 1:
        dev = np.array([norm(v - mean) for v in values])
        var = float(np.sum(dev * dev) / (n_samples - 1))
    else:
        var = 0.0
    return McEstimate(mean=mean, variance=var, n_samples=n_samples)


def mlmc_estimate(plan, forward, sampler, *, norm=_rms, workers=1):
    """Multilevel estimate with nested draws shared across levels.

    ``forward(eta, levels)`` must return the quantity of interest for each
    requested level index of the same permeability sample.  The draw for
    sample index m is identical at every level, so each correction
    E[X_l - X_{l-1}] couples both terms through one permeability field.
    """
    n_levels = plan.n_levels

    def one(m):
        levels = [l for l in range(n_levels) if plan.samples[l] > m]
        try:
            vals = forward(sampler.draw(m), levels)
        except (ConfigurationError, DomainError):
            raise
        except Exception as exc:
            raise NumericalError(
                f"forward evaluation failed for sample index {m} at levels "
                f"{levels} (prior seed {sampler.seed})") from exc
        vals = [np.atleast_1d(np.asarray(v, dtype=float)) for v in vals]
        out = [vals[0]]
        for i in range(1, len(levels)):
            out.append(vals[i] - vals[i - 1])
        return out

    contribs = _map_indexed(one, plan.samples[0], workers)
    means, variances = [], []
    for l in range(n_levels):
        level_vals = [c[l] for c in contribs if len(c) > l]
        stack = np.stack(level_vals)
        mean = stack.mean(axis=0)
        means.append(mean)
        if len(level_vals) > 1:
            dev = np.array([norm(v - mean) for v in level_vals])
            variances.append(float(np.sum(dev * dev) / (len(level_vals) - 1)))
        else:
            variances.append(0.0)
    return LevelEstimate(level_means=means, level_variances=np.array(variances),
                         samples=plan.samples)


def _map_indexed(fn, n, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(m) for m in range(n)]


def cost_matched_mc_samples(plan):
    """Number of finest-level samples whose cost equals the whole plan."""
    total = sum(plan.cost_units())
    return int(round(total / (plan.dims[-1] ** 2)))


def allocate_samples(deltas, m, e_x2):
    """Per-level sample counts that equate the telescoped error terms.

    ``deltas`` are per-level error proxies, largest (coarsest) first.  The
    first level gets m * e_x2 / deltas[-1]^2 samples and level l gets
    m * (deltas[l-1] / deltas[-1])^2, rounded up and forced nonincreasing.
    """
    deltas = np.asarray(deltas, dtype=float)
    if deltas.ndim != 1 or deltas.size < 1:
        raise ConfigurationError("deltas must be a nonempty 1-d sequence")
    if np.any(deltas <= 0):
        raise ConfigurationError(f"error proxies must be positive, got {deltas}")
    if np.any(np.diff(deltas) > 0):
        raise ConfigurationError(
            f"error proxies must be nonincreasing across levels, got {deltas}")
    if np.any(np.diff(deltas) == 0):
        warnings.warn("equal adjacent error proxies; allocation is degenerate",
                      RuntimeWarning, stacklevel=2)
    if m < 1:
        raise ConfigurationError(f"m must be >= 1, got {m}")
    if e_x2 < 0:
        raise ConfigurationError(f"e_x2 must be >= 0, got {e_x2}")

    tail = deltas[-1]
    counts = np.empty(deltas.size, dtype=np.int64)
    counts[0] = int(np.ceil(m * e_x2 / tail ** 2))
    for l in range(1, deltas.size):
        counts[l] = int(np.ceil(m * (deltas[l - 1] / tail) ** 2))
    # rounding must not break monotonicity
    counts = np.maximum.accumulate(counts[::-1])[::-1]
    return np.maximum(counts, 1)


def relative_l2_error(estimate, reference, weights=None):
    """Relative weighted-l2 distance between nodal fields.

    ``weights`` are nodal quadrature weights (trapezoidal on our grids);
    omitted weights give the plain root-mean-square ratio.
    """
    est = np.asarray(estimate, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if est.shape != ref.shape:
        raise ConfigurationError(
            f"estimate shape {est.shape} does not match reference {ref.shape}")
    if weights is None:
        weights = np.full(ref.shape, 1.0 / ref.size)
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != ref.shape:
            raise ConfigurationError(
                f"weights shape {weights.shape} does not match fields {ref.shape}")
    ref_norm = np.sqrt(np.sum(weights * ref * ref))
    if ref_norm == 0.0:
        raise DomainError("reference field has zero norm")
    diff = ref - est
    return float(np.sqrt(np.sum(weights * diff * diff)) / ref_norm)


def pilot_deltas(forward, fine, sampler, n_levels, *, n_pilot=16, weights=None):
    """Estimate per-level error proxies from a small pilot run.

    Returns (deltas, e_x2) where deltas[l] is the mean weighted-l2 distance
    between the level-l and fine solutions and e_x2 the mean squared fine
    norm, both over ``n_pilot`` prior draws.  Inputs for allocate_samples.
    """
    if n_pilot < 1:
        raise ConfigurationError(f"n_pilot must be >= 1, got {n_pilot}")
    levels = list(range(n_levels))
    dists = np.zeros(n_levels)
    e_x2 = 0.0
    for m in range(n_pilot):
        eta = sampler.draw(m)
        vals = forward(eta, levels)
        u_fine = np.asarray(fine(eta), dtype=float)
        if weights is None:
            w = np.full(u_fine.shape, 1.0 / u_fine.size)
        else:
            w = np.asarray(weights, dtype=float)
        for l in range(n_levels):
            d = np.asarray(vals[l], dtype=float) - u_fine
            dists[l] += np.sqrt(np.sum(w * d * d))
        e_x2 += float(np.sum(w * u_fine * u_fine))
    return dists / n_pilot, e_x2 / n_pilot
