"""Exception types shared across the package."""


class ReenrollError(Exception):
    """Base class for all package errors."""


class ParseError(ReenrollError, ValueError):
    """Malformed input file (bad row, bad header, bad JSON)."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ReenrollError, ValueError):
    """Data violates a structural invariant.

    ``errors`` holds ``(locator, message)`` pairs so callers can report
    every problem at once instead of only the first.
    """

    def __init__(self, errors):
        self.errors = list(errors)
        shown = "; ".join(f"{loc}: {msg}" for loc, msg in self.errors[:10])
        more = len(self.errors) - 10
        if more > 0:
            shown += f"; ... ({more} more)"
        super().__init__(shown)


class SchemeError(ReenrollError, ValueError):
    """Assignment scheme is malformed or does not cover the data."""


class EstimationError(ReenrollError, RuntimeError):
    """An estimator cannot be computed on the supplied data."""


class ConfigError(ReenrollError, ValueError):
    """Simulation or command-line configuration is invalid."""
