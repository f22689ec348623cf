"""Exception hierarchy shared by all modules."""


class BrokenFlowError(Exception):
    """Base class for package errors."""


class DomainError(BrokenFlowError, ValueError):
    """A point lies outside the set an operation is defined on."""


class GeometryError(BrokenFlowError):
    """Metric data is degenerate (non-SPD, vanishing gradient, ...)."""


class ChartEscapeError(BrokenFlowError):
    """A geodesic left the coordinate chart."""


class BudgetError(BrokenFlowError):
    """Integration budget exhausted before the expected event."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class CapabilityError(BrokenFlowError):
    """The manifold spec lacks a required capability (e.g. an extension)."""


class CoverageError(BrokenFlowError):
    """The relation does not contain enough events to answer a query."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ResolutionError(BrokenFlowError):
    """A sampled graph is disconnected at the requested resolution."""


class DataError(BrokenFlowError, ValueError):
    """Input data violates a documented invariant."""


class ConfigError(BrokenFlowError, ValueError):
    """Invalid pipeline or manifold configuration."""
