"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and usage problems exit
with 2, everything else that goes wrong at runtime exits with 1.
"""


class GancaError(Exception):
    """Base class for all package errors."""


class ConfigError(GancaError, ValueError):
    """Invalid shapes, hyperparameters or configuration values."""


class UsageError(GancaError, ValueError):
    """An API was called in a way its contract does not allow."""


class TrainingDiverged(GancaError, RuntimeError):
    """A loss became NaN or infinite during training."""

    def __init__(self, step, n_iters, loss, what="loss"):
        self.step = step
        self.n_iters = n_iters
        self.loss = loss
        super().__init__(
            f"non-finite {what} at step {step} (n_iters={n_iters}, {what}={loss})"
        )


class ImageIOError(GancaError, OSError):
    """A PNG could not be read, decoded or written."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{path}: {reason}")
