"""
Exception hierarchy for mgcn.

Every error carries the exit code the CLI reports for it:
0 success, 1 usage, 2 data/IO, 3 numeric failure.
"""


class MgcnError(Exception):
    """Base class for all mgcn errors."""

    exit_code = 1


class UsageError(MgcnError):
    """Bad flags, unknown model names, empty run lists."""


class ShapeError(MgcnError, ValueError):
    """A tensor or layer shape contract was violated."""


class ModelConfigError(MgcnError, ValueError):
    """Invalid arguments to a model builder."""


class TapeError(MgcnError, ValueError):
    """Backward was called on something the tape cannot differentiate."""


class DataError(MgcnError):
    """Dataset, filesystem or decoding problem."""

    exit_code = 2


class CheckpointError(DataError):
    """Checkpoint file is malformed or disagrees with its architecture."""


class NumericError(MgcnError):
    """Non-finite values or failed numerical self-checks."""

    exit_code = 3


class DivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(
            f"loss became non-finite ({loss}) at epoch {epoch}, batch {batch}"
        )
