"""Uniform K-bit quantization primitives.

A quantizer is a clipped affine map between real values and unsigned integer
codes.  Given a range [a, b] and K bits, the step size is
``delta = (b - a) / (2**K - 1)``; encoding rounds ``(clamp(x) - a) / delta``
half away from zero, and decoding is ``code * delta + a``.  Codes live in
``[0, 2**K - 1]``.

``fake_quant`` runs the encode/decode round trip inside the autodiff graph
with a straight-through gradient: identity inside [a, b], zero outside.

``RangeTracker`` maintains an exponential moving average of observed batch
minima and maxima, used to set activation ranges during training and
calibration.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ContractError
from .tensor import Tensor

_DEGENERATE_HALF_WIDTH = 1e-8


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with ties going away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def clamp(x, a: float, b: float):
    """Elementwise min(max(x, a), b)."""
    return np.minimum(np.maximum(x, a), b)


def _code_dtype(k: int):
    if k <= 8:
        return np.uint8
    if k <= 16:
        return np.uint16
    return np.uint32


@dataclasses.dataclass(frozen=True)
class QuantParams:
    """Range and bit width of one uniform quantizer.

    ``b`` is excluded from equality: a quantizer is determined by
    (a, delta, k), and ``b`` reconstructed from those may differ from the
    original by one float ulp.
    """

    a: float
    b: float = dataclasses.field(compare=False)
    k: int = 8
    delta: float = 0.0

    @staticmethod
    def from_range(a: float, b: float, k: int = 8) -> "QuantParams":
        """Build a quantizer covering [a, b] with 2**k levels.

        A degenerate range (b == a) is widened symmetrically by 1e-8 so the
        step size is never zero.
        """
        a, b = float(a), float(b)
        if k < 2:
            raise ContractError(f"bit width must be at least 2, got {k}")
        if not (np.isfinite(a) and np.isfinite(b)):
            raise ContractError(f"range bounds must be finite, got [{a}, {b}]")
        if b < a:
            raise ContractError(f"empty range: b={b} < a={a}")
        if b == a:
            a, b = a - _DEGENERATE_HALF_WIDTH, a + _DEGENERATE_HALF_WIDTH
        delta = (b - a) / (2 ** k - 1)
        return QuantParams(a=a, b=b, k=k, delta=delta)

    @staticmethod
    def from_step(a: float, delta: float, k: int) -> "QuantParams":
        """Rebuild a quantizer from its stored (a, delta, k) triple."""
        if k < 2:
            raise ContractError(f"bit width must be at least 2, got {k}")
        if delta <= 0 or not np.isfinite(delta):
            raise ContractError(f"step size must be positive and finite, got {delta}")
        b = float(a) + float(delta) * (2 ** k - 1)
        return QuantParams(a=float(a), b=b, k=int(k), delta=float(delta))

    @property
    def levels(self) -> int:
        return 2 ** self.k

    @property
    def max_code(self) -> int:
        return 2 ** self.k - 1


def quantize(x, params: QuantParams) -> np.ndarray:
    """Encode real values to unsigned codes in [0, 2**k - 1]."""
    x = np.asarray(x, dtype=np.float64)
    clipped = clamp(x, params.a, params.b)
    codes = round_half_away((clipped - params.a) / params.delta)
    codes = np.clip(codes, 0, params.max_code)
    return codes.astype(_code_dtype(params.k))


def dequantize(codes, params: QuantParams) -> np.ndarray:
    """Decode unsigned codes back to real values: code * delta + a."""
    return np.asarray(codes, dtype=np.float64) * params.delta + params.a


@dataclasses.dataclass
class QuantizedTensor:
    """An array of codes together with the quantizer that produced them."""

    codes: np.ndarray
    params: QuantParams

    @staticmethod
    def from_real(x, params: QuantParams) -> "QuantizedTensor":
        return QuantizedTensor(codes=quantize(x, params), params=params)

    def dequantize(self) -> np.ndarray:
        return dequantize(self.codes, self.params)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


def weight_range(w: np.ndarray, k: int = 8) -> QuantParams:
    """Quantizer spanning the exact min/max of a weight array."""
    w = np.asarray(w)
    if w.size == 0:
        raise ContractError("cannot derive a range from an empty array")
    if not np.isfinite(w).all():
        raise ContractError("weight array contains NaN/Inf")
    return QuantParams.from_range(float(w.min()), float(w.max()), k)


def fake_quant(x: Tensor, params: QuantParams) -> Tensor:
    """Quantize-dequantize round trip with a straight-through gradient.

    Forward emits dequantize(quantize(x)); backward passes the incoming
    gradient unchanged where a <= x <= b and zero elsewhere.
    """
    codes = quantize(x.data, params)
    data = dequantize(codes, params)
    mask = (x.data >= params.a) & (x.data <= params.b)
    return Tensor._from_op(data, (x,), lambda g: (g * mask,))


@dataclasses.dataclass
class RangeTracker:
    """Exponential moving average of observed batch minima and maxima.

    The first observation sets the running values directly; afterwards each
    update moves them by ``new = momentum * old + (1 - momentum) * batch``.
    """

    momentum: float = 0.9
    running_min: float = 0.0
    running_max: float = 0.0
    initialized: bool = False

    def update(self, batch_min: float, batch_max: float) -> None:
        batch_min, batch_max = float(batch_min), float(batch_max)
        if not (np.isfinite(batch_min) and np.isfinite(batch_max)):
            raise ContractError("tracker update with non-finite bounds")
        if batch_max < batch_min:
            raise ContractError(f"tracker update with max {batch_max} < min {batch_min}")
        if not self.initialized:
            self.running_min = batch_min
            self.running_max = batch_max
            self.initialized = True
            return
        # Delta form of m*old + (1-m)*new: algebraically identical, but a
        # constant stream is an *exact* fixed point (the increment is 0.0).
        m = self.momentum
        self.running_min += (1.0 - m) * (batch_min - self.running_min)
        self.running_max += (1.0 - m) * (batch_max - self.running_max)

    def observe(self, x: np.ndarray) -> None:
        x = np.asarray(x)
        if x.size == 0:
            raise ContractError("tracker observation of an empty array")
        self.update(float(x.min()), float(x.max()))

    def params(self, k: int = 8) -> QuantParams:
        if not self.initialized:
            raise ContractError("tracker has no observations yet")
        return QuantParams.from_range(self.running_min, self.running_max, k)

    def copy(self) -> "RangeTracker":
        return dataclasses.replace(self)
