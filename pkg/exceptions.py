from typing import Any, Optional


class LaverError(Exception):
    """Root of every error raised by the training kit."""
    pass


class RejectedInputError(LaverError, ValueError):
    """A public operation was called with inputs violating its preconditions."""
    pass


class FormatError(LaverError):
    """Raised for malformed LVTD/LVCK files, config files and metric logs."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ForwardFault(LaverError):
    """Non-finite activations detected inside the decoder stack."""

    def __init__(self, layer: int, message: str = "non-finite hidden state"):
        self.layer = layer
        super().__init__(f"layer {layer}: {message}")


class TeacherFault(LaverError):
    """Teacher and student parameters are structurally incompatible."""
    pass


class TrainingAborted(LaverError):
    """Training stopped on a non-finite loss; carries the last good metric record."""

    def __init__(self, step: int, last_record: Optional[Any] = None):
        self.step = step
        self.last_record = last_record
        super().__init__(f"non-finite loss at step {step}")
