"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 1, ``DataError`` -> 2,
``NumericalError`` -> 3.
"""


class ContractError(ValueError):
    """An operation was called with inputs violating its preconditions."""


class ConfigError(ValueError):
    """Malformed or unknown configuration key."""

    def __init__(self, message, key_path=None):
        super().__init__(message if key_path is None else f"{key_path}: {message}")
        self.key_path = key_path


class DataError(RuntimeError):
    """Missing or unreadable input files."""


class NumericalError(RuntimeError):
    """A non-finite value appeared where it cannot be tolerated."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context or {}
