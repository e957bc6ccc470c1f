"""Exception types used across the package."""


class ParameterError(ValueError):
    """Invalid argument values or shape mismatches."""


class FieldEvalError(RuntimeError):
    """A neural field produced non-finite output."""


class ConvergenceError(RuntimeError):
    """An iterative procedure failed to reach its target within budget."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt, truncated, or unsupported."""


class GuidanceError(RuntimeError):
    """Guidance backend reported a failure."""


class GuidanceConnectionError(GuidanceError):
    """Remote guidance endpoint unreachable (retriable)."""


class ProtocolError(GuidanceError):
    """Malformed bytes on the guidance wire protocol."""


class TrainingAborted(RuntimeError):
    """Training loop stopped early; carries the last good checkpoint path."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
