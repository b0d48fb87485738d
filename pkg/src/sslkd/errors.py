"""Exception hierarchy shared by every stage of the pipeline."""


class SSLKDError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SSLKDError, ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class ShapeError(SSLKDError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ValidationError(SSLKDError, ValueError):
    """Input data violates a documented invariant."""


class CheckpointError(SSLKDError, RuntimeError):
    """A checkpoint is missing, corrupt, or does not match its recorded hash."""


class TrainingError(SSLKDError, RuntimeError):
    """Training aborted (non-finite loss, violated invariant)."""
