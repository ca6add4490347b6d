"""Exception hierarchy shared by every cafewidth module."""


class CafeError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this failure."""

    exit_code = 1


class GraphError(CafeError, ValueError):
    exit_code = 3


class InvalidWidthError(CafeError, ValueError):
    exit_code = 4


class EmptyPlanError(CafeError, ValueError):
    exit_code = 5


class InfeasibleBudgetError(CafeError, ValueError):
    exit_code = 6


class UndefinedDegreeError(CafeError, ValueError):
    exit_code = 7


class TrainingError(CafeError, RuntimeError):
    exit_code = 8


class FormatError(CafeError, ValueError):
    exit_code = 9


class ConfigError(CafeError, ValueError):
    exit_code = 2
