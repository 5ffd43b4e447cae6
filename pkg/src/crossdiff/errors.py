"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class CrossDiffError(Exception):
    """Base class for package errors."""


class ConfigError(CrossDiffError):
    """Invalid configuration, unknown key, or unusable flag value."""


class DataError(CrossDiffError):
    """Missing, unreadable, or inconsistent dataset / checkpoint files."""


class NumericError(CrossDiffError):
    """Non-finite values or numeric divergence during compute."""
