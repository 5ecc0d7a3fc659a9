"""
Exception types shared by the data, training, evaluation and CLI layers.

The CLI maps these onto its exit codes (see main.py).
"""

from __future__ import annotations

from typing import Optional


class S4SegError(Exception):
    """Base class for every error raised on purpose by this project."""


class ShapeError(S4SegError, ValueError):
    """Tensor or array dimensions violate a documented contract."""


class DatasetError(S4SegError, ValueError):
    """Input data on disk or in memory cannot be turned into slices/masks."""


class NonFiniteLossError(S4SegError, FloatingPointError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"Loss term '{term}' is not finite ({value})")

    def __reduce__(self):
        return (self.__class__, (self.term, self.value))


class TrainingAborted(S4SegError, RuntimeError):
    """Training stopped because a loss diverged."""

    def __init__(self, iteration: int, term: str, value: float):
        self.iteration = iteration
        self.term = term
        self.value = value
        super().__init__(f"Training aborted at iteration {iteration}: term '{term}' = {value}")

    def __reduce__(self):
        return (self.__class__, (self.iteration, self.term, self.value))


class IntegrityError(S4SegError):
    """A stored artifact does not match its recorded content hash."""


class RunDirectoryExists(S4SegError):
    """Refusing to write into a non-empty run directory without --force."""


class SweepCellError(S4SegError):
    """A single (ratio, seed) cell of a sweep failed."""

    def __init__(self, ratio: str, seed: int, cause: Optional[BaseException] = None):
        self.ratio = ratio
        self.seed = seed
        self.cause = cause
        super().__init__(f"Sweep cell ratio={ratio} seed={seed} failed: {cause}")

    def __reduce__(self):
        return (self.__class__, (self.ratio, self.seed, self.cause))
