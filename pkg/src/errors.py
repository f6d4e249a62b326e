"""Exceptions raised by the optimization library and the experiment runner."""


class OptimizationError(Exception):
    """Base class for every error raised by this package."""


# ==========================================================
# Graphs
# ==========================================================

class DisconnectedGraph(OptimizationError):
    pass


class InvalidEdge(OptimizationError, ValueError):
    pass


class DimensionMismatch(OptimizationError, ValueError):
    pass


class NotConverged(OptimizationError):
    pass


class TopologyViolation(OptimizationError):
    """A node read a vector that did not come from itself or a graph neighbour."""


# ==========================================================
# Problems and oracles
# ==========================================================

class SingularInstance(OptimizationError):
    pass


class NotStronglyConvex(OptimizationError):
    pass


class MissingCurvature(OptimizationError):
    pass


class OracleFailure(OptimizationError):
    pass


# ==========================================================
# Methods
# ==========================================================

class NonpositiveL(OptimizationError, ValueError):
    pass


class InvalidTolerance(OptimizationError, ValueError):
    pass


class BudgetExceeded(OptimizationError):
    """Inner solver stopped at its iteration budget before reaching the target."""

    def __init__(self, message: str, achieved: float = float("nan"), iterations: int = 0, solution=None):
        super().__init__(message)
        self.achieved = achieved
        self.iterations = iterations
        self.solution = solution


class DivergenceError(OptimizationError):
    pass


# ==========================================================
# Experiment runner
# ==========================================================

class ConfigError(OptimizationError, ValueError):
    """Invalid experiment configuration; `field` is the dotted key path at fault."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class NonPositiveData(OptimizationError, ValueError):
    pass
