"""Log-normal permeability fields via a truncated Karhunen-Loeve expansion.

The Gaussian log-field has a separable squared-exponential covariance.  Its
eigenpairs are computed by trapezoidal collocation on the fine grid: with
nodal weights W the continuous eigenproblem becomes the symmetric problem
W^(1/2) C W^(1/2) v = lambda v, and eigenfunctions are recovered as
phi = W^(-1/2) v, orthonormal in the weighted inner product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigurationError
from .grid import StructuredGridPair


@dataclass(frozen=True)
class CovarianceSpec:
    """Separable squared-exponential covariance of the log-permeability.

    sigma2 is the pointwise variance, l1 and l2 the correlation lengths in
    the two coordinate directions.
    """

    sigma2: float
    l1: float
    l2: float

    def __post_init__(self):
        if self.sigma2 < 0.0:
            raise ConfigurationError(f"sigma2 must be nonnegative, got {self.sigma2}")
        if self.l1 <= 0.0 or self.l2 <= 0.0:
            raise ConfigurationError(
                f"correlation lengths must be positive, got l1={self.l1}, l2={self.l2}")


@dataclass(frozen=True)
class KLModel:
    """Truncated expansion of the log-field at the fine nodes.

    eigenvalues are descending; eigenfunctions has one mode per column and
    is orthonormal under the stored trapezoidal weights.
    """

    spec: CovarianceSpec
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    weights: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    @property
    def n_nodes(self) -> int:
        return self.eigenfunctions.shape[0]


def assemble_covariance(grid: StructuredGridPair, spec: CovarianceSpec) -> np.ndarray:
    """Dense covariance matrix over all fine nodes."""
    x = grid.fine_coords
    d1 = x[:, 0][:, None] - x[:, 0][None, :]
    d2 = x[:, 1][:, None] - x[:, 1][None, :]
    return spec.sigma2 * np.exp(-(d1 ** 2) / (2.0 * spec.l1 ** 2)
                                - (d2 ** 2) / (2.0 * spec.l2 ** 2))


def covariance_trace(grid: StructuredGridPair, spec: CovarianceSpec) -> float:
    """Weighted trace of the covariance operator (total KL energy)."""
    return spec.sigma2 * float(np.sum(grid.trapezoid_weights()))


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Make the first nonzero component of each column nonnegative."""
    out = vectors.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        big = np.flatnonzero(np.abs(col) > 1e-12 * np.max(np.abs(col)))
        if big.size and col[big[0]] < 0.0:
            out[:, k] = -col
    return out


def truncated_kle(grid: StructuredGridPair, spec: CovarianceSpec, n_modes: int) -> KLModel:
    """Leading eigenpairs of the collocated covariance operator.

    Ties in the spectrum are broken by the deterministic LAPACK ordering;
    signs are fixed so the first nonzero component of each eigenfunction is
    nonnegative.  Small negative round-off eigenvalues are clipped to zero.
    """
    n = grid.n_fine_nodes
    if not 1 <= n_modes <= n:
        raise ConfigurationError(f"n_modes must be in [1, {n}], got {n_modes}")
    w = grid.trapezoid_weights()
    sqw = np.sqrt(w)
    b = assemble_covariance(grid, spec) * sqw[:, None] * sqw[None, :]
    b = 0.5 * (b + b.T)
    vals, vecs = scipy.linalg.eigh(b, subset_by_index=[n - n_modes, n - 1])
    vals = vals[::-1].copy()
    vecs = vecs[:, ::-1]
    lead = vals[0] if n_modes else 0.0
    neg = vals < 0.0
    vals[neg & (np.abs(vals) < 1e-12 * max(lead, 1.0))] = 0.0
    if np.any(vals < 0.0):
        raise ConfigurationError(
            "covariance eigenvalues are negative beyond round-off; "
            "check the covariance parameters")
    funcs = _fix_signs(vecs / sqw[:, None])
    vals.flags.writeable = False
    funcs.flags.writeable = False
    return KLModel(spec=spec, eigenvalues=vals, eigenfunctions=funcs, weights=w)


def energy_ratio(model: KLModel, full_trace: float) -> float:
    """Fraction of the total field energy captured by the truncation."""
    if full_trace < 0.0:
        raise ConfigurationError(f"full_trace must be nonnegative, got {full_trace}")
    if full_trace == 0.0:
        return 1.0
    return float(np.sum(model.eigenvalues) / full_trace)


def log_field(model: KLModel, eta: np.ndarray) -> np.ndarray:
    """Gaussian log-permeability at the fine nodes for coefficients eta."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (model.n_modes,):
        raise ConfigurationError(
            f"parameter vector has shape {eta.shape}, expected ({model.n_modes},)")
    return model.eigenfunctions @ (np.sqrt(model.eigenvalues) * eta)


def sample_permeability(model: KLModel, eta: np.ndarray) -> np.ndarray:
    """Pointwise positive permeability k = exp(log-field)."""
    return np.exp(log_field(model, eta))


class PriorSampler:
    """Reproducible standard normal draws addressed by sample index.

    Each (seed, tag, index) triple seeds its own generator, so draws are
    independent across indices and identical no matter which subset of
    indices a run touches or in which order.  Levels share draws by reusing
    the index, which is what nests the multilevel sample sets.
    """

    def __init__(self, n_modes: int, seed: int, tag: int = 0):
        if n_modes < 1:
            raise ConfigurationError(f"n_modes must be positive, got {n_modes}")
        self.n_modes = int(n_modes)
        self.seed = int(seed)
        self.tag = int(tag)

    def draw(self, index: int) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((self.seed, self.tag, int(index)))))
        return rng.standard_normal(self.n_modes)
