"""Bit-exact access to FP32 and BF16 sign/exponent/mantissa fields.

Both formats are carried in ``numpy.float32``: a BF16 value is an FP32 value
whose low 16 bits are zero. Subnormals are flushed to zero on the way in and
on the way out, so a biased exponent of 0 always means zero.
"""

import enum
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from expmul_attn.exceptions import ConfigError, ContractError, DomainError

_BF16_SHIFT = 16
_BF16_LOW_MASK = 0xFFFF


class Dtype(enum.Enum):
    """Floating-point storage format of kernel operands."""

    FP32 = "fp32"
    BF16 = "bf16"

    @property
    def exponent_bits(self) -> int:
        return 8

    @property
    def mantissa_bits(self) -> int:
        return 23 if self is Dtype.FP32 else 7

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def total_bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def exponent_max(self) -> int:
        """All-ones exponent field (infinity/NaN encodings)."""
        return (1 << self.exponent_bits) - 1

    @property
    def itemsize(self) -> int:
        return self.total_bits // 8

    @property
    def code(self) -> int:
        """Tensor file dtype code."""
        return 0 if self is Dtype.FP32 else 1

    @classmethod
    def from_code(cls, code: int) -> "Dtype":
        for dtype in cls:
            if dtype.code == code:
                return dtype
        raise ConfigError(f"unknown dtype code {code}")

    @classmethod
    def parse(cls, name: str) -> "Dtype":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(f"unknown dtype {name!r} (expected fp32 or bf16)") from None


@dataclass(frozen=True)
class FloatParts:
    """Decomposed IEEE-754 fields of one FP32 or BF16 scalar."""

    sign: int
    biased_exponent: int
    mantissa: int
    dtype: Dtype = Dtype.FP32

    def __post_init__(self):
        if self.sign not in (0, 1):
            raise ContractError(f"sign bit must be 0 or 1, got {self.sign}")
        if not 0 <= self.biased_exponent < (1 << self.dtype.exponent_bits):
            raise ContractError(f"biased exponent {self.biased_exponent} out of range")
        if not 0 <= self.mantissa < (1 << self.dtype.mantissa_bits):
            raise ContractError(f"mantissa {self.mantissa:#x} out of range for {self.dtype.value}")


def to_bits(v, dtype: Dtype = Dtype.FP32) -> int:
    """Return the raw bit pattern of ``v`` (16 bits for BF16)."""
    with np.errstate(over="ignore"):
        f = np.float32(v)
    if math.isfinite(float(v)) and float(f) != float(v):
        raise ContractError(f"{v!r} is not representable in fp32")
    bits = int(f.view(np.uint32))
    if dtype is Dtype.BF16:
        if bits & _BF16_LOW_MASK:
            raise ContractError(f"{v!r} is not representable in bf16")
        bits >>= _BF16_SHIFT
    return bits


def from_bits(bits: int, dtype: Dtype = Dtype.FP32) -> np.float32:
    """Build a scalar from its raw bit pattern."""
    if not 0 <= bits < (1 << dtype.total_bits):
        raise ContractError(f"bit pattern {bits:#x} does not fit {dtype.value}")
    if dtype is Dtype.BF16:
        bits <<= _BF16_SHIFT
    return np.uint32(bits).view(np.float32)


def extract(v, dtype: Dtype = Dtype.FP32) -> FloatParts:
    """Split a finite scalar into sign, biased exponent and mantissa.

    Subnormal inputs come back as zero (exponent and mantissa both 0).

    Raises:
        DomainError: ``v`` is NaN or infinite.
        ContractError: ``v`` is not representable in ``dtype``.
    """
    if not math.isfinite(float(v)):
        raise DomainError(f"cannot decompose non-finite value {v!r}")
    bits = to_bits(v, dtype)
    m = dtype.mantissa_bits
    sign = bits >> (dtype.total_bits - 1)
    exponent = (bits >> m) & dtype.exponent_max
    mantissa = bits & ((1 << m) - 1)
    if exponent == 0:
        mantissa = 0
    return FloatParts(sign, exponent, mantissa, dtype)


def compose(parts: FloatParts) -> np.float32:
    """Inverse of :func:`extract`; a zero exponent field yields +0.0."""
    dtype = parts.dtype
    if parts.biased_exponent == 0:
        return np.float32(0.0)
    if parts.biased_exponent == dtype.exponent_max:
        raise DomainError("exponent field encodes infinity or NaN")
    m = dtype.mantissa_bits
    bits = (parts.sign << (dtype.total_bits - 1)) | (parts.biased_exponent << m) | parts.mantissa
    return from_bits(bits, dtype)


def round_fp32_to_bf16(v) -> np.float32:
    """Round an FP32 scalar to BF16, ties to even.

    Values above the BF16 range round to infinity; kernels reject those at
    tensor ingest.
    """
    if math.isnan(float(v)):
        raise DomainError("cannot round NaN to bf16")
    bits = to_bits(v, Dtype.FP32)
    rounded = (bits + 0x7FFF + ((bits >> _BF16_SHIFT) & 1)) >> _BF16_SHIFT
    return from_bits(rounded, Dtype.BF16)


# --- array forms ---

def require_finite(values, what: str = "input") -> None:
    """Raise DomainError if ``values`` holds NaN or infinity."""
    if not np.all(np.isfinite(values)):
        raise DomainError(f"{what} contains NaN or infinite values")


def to_bits_array(values, dtype: Dtype = Dtype.FP32) -> np.ndarray:
    """Vectorized :func:`to_bits`; returns uint32 patterns."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    bits = arr.view(np.uint32)
    if dtype is Dtype.BF16:
        if np.any(bits & np.uint32(_BF16_LOW_MASK)):
            raise ContractError("array holds values not representable in bf16")
        bits = bits >> np.uint32(_BF16_SHIFT)
    return bits


def from_bits_array(bits, dtype: Dtype = Dtype.FP32) -> np.ndarray:
    """Vectorized :func:`from_bits`; returns float32 values."""
    bits = np.ascontiguousarray(bits, dtype=np.uint32)
    if dtype is Dtype.BF16:
        bits = bits << np.uint32(_BF16_SHIFT)
    return bits.view(np.float32)


def extract_array(values, dtype: Dtype = Dtype.FP32) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`extract`; returns (sign, exponent, mantissa) arrays."""
    require_finite(values, "extract input")
    bits = to_bits_array(values, dtype)
    m = np.uint32(dtype.mantissa_bits)
    sign = bits >> np.uint32(dtype.total_bits - 1)
    exponent = (bits >> m) & np.uint32(dtype.exponent_max)
    mantissa = bits & np.uint32((1 << dtype.mantissa_bits) - 1)
    mantissa = np.where(exponent == 0, np.uint32(0), mantissa)
    return sign, exponent, mantissa


def compose_array(sign, exponent, mantissa, dtype: Dtype = Dtype.FP32) -> np.ndarray:
    """Vectorized :func:`compose`.

    ``exponent`` may be signed; entries at or below zero compose to +0.0.
    """
    exponent = np.asarray(exponent, dtype=np.int64)
    if np.any(exponent >= dtype.exponent_max):
        raise DomainError("exponent field encodes infinity or NaN")
    live = exponent > 0
    bits = (
        (np.asarray(sign, dtype=np.uint32) << np.uint32(dtype.total_bits - 1))
        | (np.where(live, exponent, 0).astype(np.uint32) << np.uint32(dtype.mantissa_bits))
        | np.asarray(mantissa, dtype=np.uint32)
    )
    bits = np.where(live, bits, np.uint32(0))
    return from_bits_array(bits, dtype)


def quantize(values, dtype: Dtype = Dtype.FP32) -> np.ndarray:
    """Round to the storage format of ``dtype`` and flush subnormals.

    Wider inputs round to FP32 first (nearest even), then to BF16 when asked.
    """
    with np.errstate(over="ignore"):
        arr = np.array(values, dtype=np.float32)
    bits = arr.view(np.uint32)
    if dtype is Dtype.BF16:
        carry = (bits >> np.uint32(_BF16_SHIFT)) & np.uint32(1)
        bits = (bits + np.uint32(0x7FFF) + carry) & np.uint32(0xFFFF0000)
    subnormal = (bits & np.uint32(0x7F800000)) == 0
    bits = np.where(subnormal, np.uint32(0), bits).astype(np.uint32)
    return bits.view(np.float32)


def quantize_scalar(v, dtype: Dtype = Dtype.FP32) -> np.float32:
    """Scalar form of :func:`quantize`."""
    return quantize(v, dtype)[()]
