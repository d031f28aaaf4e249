"""Exception hierarchy for the lakf package."""

from typing import Optional


class LakfError(Exception):
    """Base class for all package errors."""


class DomainError(LakfError, ValueError):
    """Input outside the domain of an operation (bad box, bad shape, bad config)."""


class ParseError(DomainError):
    """Malformed line in a MOTChallenge text file."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ModeMismatchError(DomainError):
    """State mode or filter variant does not match what the caller expects."""


class NumericError(LakfError, ArithmeticError):
    """Non-finite or singular quantity inside a filter recursion."""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class TrainingDivergedError(NumericError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}", step=step)


class FormatError(LakfError):
    """Dataset or checkpoint file violates its schema."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field is not None:
            message = f"{message} (field: {field})"
        super().__init__(message)
