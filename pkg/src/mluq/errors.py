"""Exception types shared across the package.

The command line layer maps these onto exit codes: configuration and
integrity problems exit with 2, numerical and domain failures with 3.
"""


class ConfigurationError(Exception):
    """Invalid or inconsistent user-facing configuration."""


class IntegrityError(ConfigurationError):
    """A stored artifact failed a checksum or compatibility check."""


class NumericalError(RuntimeError):
    """A solver or factorization failed, or a residual check did not pass."""


class DomainError(ValueError):
    """Input data left the admissible domain (e.g. nonpositive permeability)."""
