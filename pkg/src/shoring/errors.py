"""Exception types shared across the package."""


class ShoringError(Exception):
    """Base class for all package errors."""


class ContractViolation(ShoringError, ValueError):
    """Inputs break a documented precondition (shapes, ranges)."""


class DomainError(ShoringError, ValueError):
    """A math primitive received a value outside its domain."""


class NondeterminismError(ShoringError, RuntimeError):
    pass


class ConfigError(ShoringError, ValueError):
    pass


class ParseError(ShoringError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VersionError(ShoringError, ValueError):
    pass


class DivergenceError(ShoringError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
