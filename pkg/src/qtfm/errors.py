"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class FormatError(ValueError):
    """A file does not match its binary format.

    Carries the byte offset at which the problem was detected when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AuditError(RuntimeError):
    """A quantization-site audit failed (unmapped or unexpected site)."""


class UncalibratedCheckpointError(RuntimeError):
    """A quantized checkpoint without calibrated activation ranges was used
    where calibrated ranges are required."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""
