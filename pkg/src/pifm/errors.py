"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be decoded."""


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step
