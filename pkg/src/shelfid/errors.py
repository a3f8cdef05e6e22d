"""Exception hierarchy shared by every module.

The CLI maps ``ConfigurationError`` to exit code 1 and ``DataError`` (and its
subclasses) to exit code 2.
"""


class ShelfIdError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ShelfIdError, ValueError):
    """Invalid hyperparameters, flags or config-file contents."""


class DataError(ShelfIdError):
    """Input data is missing, empty or unreadable."""


class ShapeError(DataError, ValueError):
    """Tensor or embedding has incompatible dimensions."""


class DegenerateInputError(DataError, ValueError):
    """Input that has no defined direction, e.g. a zero-norm embedding."""


class FormatError(DataError):
    """A binary file failed validation (magic, version, truncation)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConflictError(ShelfIdError):
    """Attempt to enroll a product id that already exists."""


class NotFoundError(ShelfIdError, KeyError):
    """Unknown product id."""

    def __str__(self) -> str:
        return Exception.__str__(self)


class StateError(ShelfIdError, RuntimeError):
    """Operation is invalid in the object's current state (e.g. empty gallery)."""


class TrainingDivergedError(ShelfIdError, RuntimeError):
    """Loss became non-finite; carries a reference to the last good checkpoint."""

    def __init__(self, message: str, epoch: int, checkpoint: str | None = None):
        if checkpoint is not None:
            message = f"{message}; last good checkpoint: {checkpoint}"
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint
