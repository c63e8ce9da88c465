class ConfigurationError(ValueError):
    """Inconsistent hyperparameters, missing assets or an invalid policy."""


class ShapeError(ValueError):
    """Tensor shapes violate a block's contract."""


class CheckpointError(RuntimeError):
    """A checkpoint bundle cannot be read or does not match the model."""


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/inf loss; ``diagnostics`` holds parameter norms."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
