"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: config problems exit 2, failed checks
exit 1, numerical breakdowns exit 3.
"""


class HalfgradError(Exception):
    """Base class for all package errors."""


class ModelError(HalfgradError):
    """Model coefficients are unusable (non-finite values, singular solves)."""


class ContractError(HalfgradError):
    """A caller-side precondition was violated (bad bump, f not zero on the boundary)."""


class DataError(HalfgradError):
    """Simulated data violated a postcondition (non-finite payoff values)."""


class NumericError(HalfgradError):
    """A numerical procedure failed to converge or overflowed."""


class ConfigError(HalfgradError):
    """Malformed experiment configuration."""
