"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class PvSignalError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PvSignalError):
    """Invalid configuration or command-line arguments."""


class DataError(PvSignalError):
    """Malformed or degenerate input data."""


class NumericalError(PvSignalError):
    """Numerical failure inside a fit or posterior computation."""
