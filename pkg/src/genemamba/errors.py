"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI maps it to.
"""


class GeneMambaError(Exception):
    exit_code = 2


class ConfigError(GeneMambaError):
    """Invalid configuration or usage (bad flag values, mismatched settings)."""

    exit_code = 1


class InputError(GeneMambaError):
    """Caller supplied a value outside an operation's domain."""


class StateError(GeneMambaError):
    """Operation not valid in the object's current state."""


class DataError(GeneMambaError):
    """Malformed or inconsistent file/data content."""


class NumericError(GeneMambaError):
    """Non-finite value produced during computation."""

    exit_code = 3
