"""Exception hierarchy. CLI exit codes hang off the three top-level bases."""


class BetaError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(BetaError, ValueError):
    """Invalid configuration or call parameters (exit code 2)."""


class DependencyError(BetaError):
    """A pipeline stage ran before the artifact it needs exists (exit code 3)."""


class NumericalError(BetaError, ArithmeticError):
    """Numerical failure: divergence, non-convergence, non-finite values (exit code 4)."""


class DimensionError(ConfigError):
    pass


class NonFiniteError(NumericalError):
    pass


class ProvenanceError(BetaError):
    """A tensor was asked for a gradient on a tape it never touched."""


class EmptyNeighborhoodError(BetaError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, column: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.column = column


class DegenerateSensorError(ConfigError):
    def __init__(self, sensors):
        super().__init__(f"constant sensor(s) on the training split: {', '.join(map(str, sensors))}")
        self.sensors = list(sensors)


class EmptySplitError(ConfigError):
    pass


class PolicyError(ConfigError):
    """An operation would violate a data-handling rule (e.g. touching train data)."""


class DegenerateEmbeddingError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class TrainingDivergedError(NumericalError):
    def __init__(self, last_finite_loss: float | None):
        super().__init__(f"training diverged; last finite loss {last_finite_loss}")
        self.last_finite_loss = last_finite_loss


class CalibrationError(BetaError):
    pass


class StateError(BetaError):
    pass


class UndefinedMetricError(BetaError, ValueError):
    pass
