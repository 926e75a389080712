"""Error types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or unparseable configuration."""


class DataError(ValueError):
    """Missing, corrupt, or inconsistent dataset contents."""


class NumericalError(RuntimeError):
    """Non-finite values encountered where finite ones are required."""
