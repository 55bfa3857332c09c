"""Exception types shared across the package."""

from __future__ import annotations


class RejectedInput(ValueError):
    """An argument violates an operation's preconditions."""


class IntegrationError(RuntimeError):
    """A velocity evaluation or update failed partway through a trajectory."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class EstimateUnreliable(RuntimeError):
    """Kernel-weighted Monte-Carlo estimate has too little effective mass."""


class TrainingAborted(RuntimeError):
    """Loss became non-finite or diverged during training."""


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass
