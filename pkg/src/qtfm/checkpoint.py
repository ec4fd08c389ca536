"""In-memory checkpoint container shared by training, quantization, and disk IO.

A checkpoint holds float32 parameter arrays (training keeps float64 working
copies; snapshots cast down), optional 8-bit quantized weights, per-site
activation ranges gathered by range trackers, and bookkeeping: the step it was
taken at, which constituent steps were averaged into it, and whether its
activation ranges are calibrated (safe for integer inference).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ContractError
from .model import ModelConfig
from .quant import QuantizedTensor
from .tensor import Tensor


@dataclasses.dataclass
class Checkpoint:
    config: ModelConfig
    step: int
    params: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    qparams: dict[str, QuantizedTensor] = dataclasses.field(default_factory=dict)
    act_ranges: dict[str, tuple[float, float]] = dataclasses.field(default_factory=dict)
    calibrated: bool = False
    constituents: list[int] = dataclasses.field(default_factory=list)

    def __post_init__(self):
        for name, arr in self.params.items():
            if arr.dtype != np.float32:
                raise ContractError(f"checkpoint array {name} must be float32, got {arr.dtype}")
        for site, (lo, hi) in self.act_ranges.items():
            if hi < lo:
                raise ContractError(f"activation range for {site} has max < min")

    @property
    def is_quantized(self) -> bool:
        return bool(self.qparams)

    def load_params(self) -> dict[str, Tensor]:
        """Materialize trainable float64 tensors (dequantizing any 8-bit weights)."""
        out: dict[str, Tensor] = {}
        for name, arr in self.params.items():
            out[name] = Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)
        for name, qt in self.qparams.items():
            out[name] = Tensor(qt.dequantize(), requires_grad=True)
        return out


def snapshot(config: ModelConfig, params: dict[str, Tensor], step: int,
             act_ranges: dict[str, tuple[float, float]] | None = None,
             calibrated: bool = False) -> Checkpoint:
    """Freeze live training parameters into a float32 checkpoint."""
    return Checkpoint(
        config=config,
        step=step,
        params={name: p.data.astype(np.float32) for name, p in params.items()},
        act_ranges=dict(act_ranges or {}),
        calibrated=calibrated,
        constituents=[step],
    )
