"""Exception hierarchy shared by every stage of the pipeline."""
from __future__ import annotations

from typing import Sequence

__all__ = [
    "RelsumError",
    "ShapeError",
    "NonFiniteError",
    "GradCheckError",
    "ConfigError",
    "CorpusError",
    "FrozenModelError",
    "TrainingDivergedError",
    "RewardGateError",
    "EmptyDatasetError",
    "UninformativeRewardError",
    "MissingArtifactError",
    "ArtifactExistsError",
    "ConfigMismatchError",
    "ArtifactLockedError",
    "InputMutatedError",
    "CheckpointFormatError",
]


class RelsumError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this failure."""

    exit_code = 1


class ShapeError(RelsumError, ValueError):
    exit_code = 10

    def __init__(self, op: str, shapes: Sequence[tuple[int, ...]], detail: str = "") -> None:
        self.op = op
        self.shapes = [tuple(shape) for shape in shapes]
        message = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class NonFiniteError(RelsumError, FloatingPointError):
    exit_code = 11


class GradCheckError(RelsumError):
    exit_code = 12


class ConfigError(RelsumError, ValueError):
    exit_code = 13


class CorpusError(RelsumError, ValueError):
    exit_code = 14

    def __init__(self, message: str, *, line: int | None = None, path: str | None = None) -> None:
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class FrozenModelError(RelsumError):
    exit_code = 15


class TrainingDivergedError(RelsumError, FloatingPointError):
    exit_code = 16

    def __init__(self, message: str, *, last_good_checkpoint: str | None = None) -> None:
        self.last_good_checkpoint = last_good_checkpoint
        if last_good_checkpoint:
            message = f"{message}; last good checkpoint: {last_good_checkpoint}"
        super().__init__(message)


class RewardGateError(RelsumError):
    exit_code = 17


class EmptyDatasetError(RelsumError):
    exit_code = 18


class UninformativeRewardError(RelsumError):
    exit_code = 19


class MissingArtifactError(RelsumError, FileNotFoundError):
    exit_code = 20


class ArtifactExistsError(RelsumError, FileExistsError):
    exit_code = 21


class ConfigMismatchError(RelsumError):
    exit_code = 22


class ArtifactLockedError(RelsumError):
    exit_code = 23


class InputMutatedError(RelsumError):
    exit_code = 24


class CheckpointFormatError(RelsumError, ValueError):
    exit_code = 25
