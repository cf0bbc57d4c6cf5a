"""Exception hierarchy shared across the package.

``ValidationError`` covers bad inputs (malformed files, inconsistent
geometry, precondition violations) and maps to CLI exit code 2.
``NumericalError`` covers failures of the numerics themselves (singular
matrices, non-finite densities) and maps to exit code 3.
"""


class YieldcastError(Exception):
    """Base class for all package errors."""


class ValidationError(YieldcastError):
    """Input data or configuration violates a documented precondition."""


class NumericalError(YieldcastError):
    """A numerical routine failed (singularity, divergence, non-finite value)."""
