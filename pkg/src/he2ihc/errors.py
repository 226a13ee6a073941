"""Exception types that map onto the CLI exit codes."""


class He2IhcError(Exception):
    """Base class for package errors."""


class ConfigError(He2IhcError):
    """Bad or inconsistent configuration (exit code 2)."""


class DataError(He2IhcError):
    """Missing, unpaired, unreadable or malformed data (exit code 3)."""


class NumericError(He2IhcError):
    """Non-finite loss or other numeric failure during a run (exit code 4)."""
