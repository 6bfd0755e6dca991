"""Exception types shared across the package."""


class DataError(ValueError):
    """A dataset, config, manifest or checkpoint file could not be parsed or validated."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss.

    Attributes:
        epoch: 1-based epoch in which the divergence was detected.
    """

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch} (non-finite loss)")
