"""Multilevel Monte Carlo and screened MCMC over a multiscale FEM hierarchy.

The package solves single-phase Darcy flow with log-normal random
permeability on structured fine/coarse grid pairs.  Reduced forward models
of increasing online dimension form the level hierarchy used by the
multilevel estimators and the multilevel screening sampler.
"""

__version__ = "0.1.0"

from .errors import ConfigurationError, DomainError, IntegrityError, NumericalError

__all__ = [
    "ConfigurationError",
    "DomainError",
    "IntegrityError",
    "NumericalError",
    "__version__",
]
