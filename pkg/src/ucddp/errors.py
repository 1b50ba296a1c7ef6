"""Exception types shared across the package.

The CLI maps the ``ValueError`` family to exit code 1 and the
``RuntimeError`` family to exit code 2.
"""


class ConfigurationError(ValueError):
    """Inputs or settings that cannot be combined (shapes, missing pieces)."""


class ValidationError(ValueError):
    """A value violates a documented precondition."""


class ParseError(ValueError):
    """A file or CSV row could not be decoded."""


class UsageError(ValueError):
    """An API was called in a way it does not support."""


class ConsistencyError(RuntimeError):
    """Data-parallel replicas or gradient sets disagree."""


class NonFiniteLossError(RuntimeError):
    """Training produced NaN or Inf; carries the recent step trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
