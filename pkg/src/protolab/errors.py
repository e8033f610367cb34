"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration and usage
problems exit 2, training divergence exits 3, unreadable or unwritable
files exit 4.
"""


class ProtolabError(Exception):
    """Base class for package errors."""


class ConfigurationError(ProtolabError):
    """A config value or combination of values is invalid."""


class UsageError(ProtolabError):
    """An API call violated a precondition (bad state, bad arguments)."""


class TrainingDivergedError(ProtolabError):
    """Training produced non-finite values and was aborted.

    Carries whatever history rows were completed before the abort so
    callers can persist a partial record.
    """

    def __init__(self, message, epoch=None, step=None, history=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.history = history if history is not None else []


class CheckpointError(ProtolabError):
    """A checkpoint file is malformed, truncated, or incompatible."""
