"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GradientError(RuntimeError):
    """backward() was called on something that is not a recorded scalar."""


class ConfigError(ValueError):
    """A model or training configuration violates its invariants."""


class InputError(ValueError):
    """Token ids or sequences are outside what the model accepts."""


class CheckpointError(OSError):
    """A checkpoint file is malformed, truncated or disagrees with its config."""


class TrainingDivergedError(FloatingPointError):
    """The loss became non-finite; carries a diagnostic dump."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics
