"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (see cli.py): configuration and usage
problems exit 2, data/format problems exit 3, failed checks exit 1.
"""


class DimensionError(ValueError):
    """Shapes or axis extents do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration value or combination of values."""


class ContractError(RuntimeError):
    """An API contract was violated (non-scalar loss, reused tape, ...)."""


class DataError(ValueError):
    """Invalid data content: bad labels, unknown subject, empty split."""


class FormatError(ValueError):
    """Malformed file: bad magic, wrong version, or truncation."""
