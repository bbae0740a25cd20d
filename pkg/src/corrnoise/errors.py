"""Exception types raised across the package."""


class CorrNoiseError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(CorrNoiseError, ValueError):
    pass


class ModelInvalidError(CorrNoiseError, ValueError):
    pass


class RankDeficiencyError(CorrNoiseError, ValueError):
    def __init__(self, message, condition_number=float("inf")):
        super().__init__(f"{message} (condition number {condition_number:.3e})")
        self.condition_number = condition_number


class InsufficientDataError(CorrNoiseError, ValueError):
    pass


class LowSupportError(CorrNoiseError, ValueError):
    pass


class ConditioningError(CorrNoiseError, ArithmeticError):
    pass


class ConvergenceError(CorrNoiseError, RuntimeError):
    def __init__(self, message, cost_trace=()):
        super().__init__(message)
        self.cost_trace = list(cost_trace)


class UnsupportedInputError(CorrNoiseError, ValueError):
    pass


class UnderdeterminedError(CorrNoiseError, ValueError):
    pass


class DegenerateConfigurationError(CorrNoiseError, ValueError):
    pass
