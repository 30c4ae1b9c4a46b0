"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/parse problems exit 2,
numerical failures exit 3.
"""


class ParameterError(ValueError):
    """A parameter is outside its mathematical domain (e.g. zero-norm quaternion)."""


class UsageError(ValueError):
    """An API was called with inconsistent or missing inputs."""


class ParseError(ValueError):
    """A file could not be parsed; message carries path and offset/line."""


class InitializationError(RuntimeError):
    """An initialization procedure diverged or failed its postcondition."""


class NumericalError(RuntimeError):
    """A non-finite value surfaced during optimization; message names the culprit."""
