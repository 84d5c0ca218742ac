from __future__ import annotations

from typing import Optional


class SatLabError(Exception):
    """Base class for every error the lab raises on purpose."""

    category = "error"


class DimacsParseError(SatLabError, ValueError):
    category = "input"

    def __init__(self, message: str, line_number: Optional[int] = None) -> None:
        self.line_number = line_number
        self.reason = message
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class OversizedInstanceError(SatLabError, ValueError):
    category = "input"


class AssignmentLengthError(SatLabError, ValueError):
    category = "input"


class ShapeMismatchError(SatLabError, ValueError):
    category = "input"


class ClauseIndexError(SatLabError, IndexError):
    category = "input"


class DatasetError(SatLabError, ValueError):
    category = "input"


class DatasetGenerationStalled(SatLabError, RuntimeError):
    category = "data"


class CheckpointError(SatLabError, ValueError):
    category = "checkpoint"


class ModelMismatchError(SatLabError, ValueError):
    category = "checkpoint"


class DecodeError(SatLabError, ValueError):
    category = "input"


class TrainingDivergedError(SatLabError, FloatingPointError):
    category = "numerical"

    def __init__(self, message: str, *, step: int, instance: Optional[int]) -> None:
        self.step = step
        self.instance = instance
        super().__init__(f"{message} (step {step}, instance {instance})")


EXIT_CODES = {
    "usage": 2,
    "input": 3,
    "data": 3,
    "numerical": 4,
    "checkpoint": 5,
}


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, SatLabError):
        return EXIT_CODES.get(error.category, 1)
    return 1
