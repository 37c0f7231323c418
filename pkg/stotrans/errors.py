# stotrans/errors.py

from typing import Iterable, List, Optional


class StoTransError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class ConfigError(StoTransError):
    """Invalid run or model configuration. Carries every offending message."""

    exit_code = 1

    def __init__(self, errors: Iterable[str]):
        self.errors: List[str] = [str(e) for e in errors]
        super().__init__("; ".join(self.errors) or "invalid configuration")


class DataError(StoTransError):
    exit_code = 2


class TrainingDivergence(StoTransError):
    """Training produced a non-finite loss or gradient."""

    exit_code = 3

    def __init__(self, message: str, history: Optional[object] = None):
        super().__init__(message)
        self.history = history


class VerificationFailure(StoTransError):
    exit_code = 4


class CheckpointError(StoTransError):
    exit_code = 2


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass
