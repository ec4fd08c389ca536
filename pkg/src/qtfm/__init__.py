"""Compact encoder-decoder sequence transducer with an 8-bit quantization pipeline."""

from .errors import (
    AuditError,
    ContractError,
    FormatError,
    ShapeError,
    TrainingDiverged,
    UncalibratedCheckpointError,
)
from .tensor import Tensor, no_grad

__all__ = [
    "AuditError",
    "ContractError",
    "FormatError",
    "ShapeError",
    "Tensor",
    "TrainingDiverged",
    "UncalibratedCheckpointError",
    "no_grad",
]

__version__ = "0.1.0"
