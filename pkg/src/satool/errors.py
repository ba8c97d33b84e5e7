"""Exception types with stable machine-readable codes for CLI error reporting."""


class ToolkitError(Exception):
    """Base class; ``code`` is the stable prefix printed by the CLI."""

    code = "error"


class ConfigError(ToolkitError):
    code = "config"


class ShapeMismatch(ToolkitError):
    code = "shape"


class DomainError(ToolkitError):
    code = "domain"


class TraceFormatError(ToolkitError):
    code = "trace-format"


class StateError(ToolkitError):
    """Operation invoked before its prerequisites were established."""

    code = "state"


class InfeasibleBudget(ToolkitError):
    code = "infeasible"

    def __init__(self, message: str, max_achievable: float):
        super().__init__(message)
        self.max_achievable = max_achievable
