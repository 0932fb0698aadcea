"""Clip, fixed-point conversion and shift-add Log2Exp.

``log2exp(x)`` returns the integer L such that 2**-L approximates e**x for
x <= 0. The input is clipped to [-15, 0], converted to a 16-bit Q6.10
two's-complement number, multiplied by log2(e) ~ 1 + 1/2 - 1/16 with two
arithmetic shifts and rounded to the nearest integer.
"""

import math
from dataclasses import dataclass
from typing import NewType

from expmul_attn.exceptions import ContractError, DomainError

INT_BITS = 6
FRAC_BITS = 10
WORD_BITS = INT_BITS + FRAC_BITS

CLIP_LOW = -15.0
CLIP_HIGH = 0.0

# -round(-15 * 1.4375)
LHAT_MAX = 22

LHat = NewType("LHat", int)

_RAW_MIN = -(1 << (WORD_BITS - 1))
_RAW_MAX = (1 << (WORD_BITS - 1)) - 1


@dataclass(frozen=True)
class FixedQ:
    """16-bit two's-complement fixed-point value, ``raw * 2**-10``."""

    raw: int

    def __post_init__(self):
        if not _RAW_MIN <= self.raw <= _RAW_MAX:
            raise ContractError(f"raw value {self.raw} does not fit {WORD_BITS} bits")

    @property
    def value(self) -> float:
        return from_fixed(self)

    @property
    def word(self) -> int:
        """Unsigned 16-bit register image."""
        return self.raw & ((1 << WORD_BITS) - 1)


def clip(x: float) -> float:
    """Clamp ``x`` to [-15, 0]; the -inf initialization sentinel maps to -15."""
    x = float(x)
    if math.isnan(x):
        raise DomainError("cannot clip NaN")
    return min(max(x, CLIP_LOW), CLIP_HIGH)


def to_fixed(x: float) -> FixedQ:
    """Convert a clipped value to Q6.10, rounding ties to even."""
    x = float(x)
    if not CLIP_LOW <= x <= CLIP_HIGH:
        raise ContractError(f"to_fixed expects a value in [{CLIP_LOW}, {CLIP_HIGH}], got {x!r}")
    # scaling by a power of two is exact, round() is ties-to-even
    return FixedQ(round(x * (1 << FRAC_BITS)))


def from_fixed(q: FixedQ) -> float:
    return q.raw / (1 << FRAC_BITS)


def arithmetic_shift_right(raw: int, k: int) -> int:
    """Sign-propagating right shift, i.e. floor(raw / 2**k)."""
    return raw >> k


def shift_add_log2e(q: FixedQ) -> int:
    """Raw Q.10 product ``q * (1 + 1/2 - 1/16)`` from two shifts and two adds.

    Python integers are unbounded, so the intermediate never wraps.
    """
    r = q.raw
    return r + arithmetic_shift_right(r, 1) - arithmetic_shift_right(r, 4)


def log2exp(x: float) -> LHat:
    """Exponent decrement L such that 2**-L approximates e**x.

    Raises:
        ContractError: ``x`` is positive.
        DomainError: ``x`` is NaN.
    """
    x = float(x)
    if math.isnan(x):
        raise DomainError("log2exp of NaN")
    if x > 0.0:
        raise ContractError(f"log2exp expects x <= 0, got {x!r}")
    t = shift_add_log2e(to_fixed(clip(x)))
    return LHat(-round(t / (1 << FRAC_BITS)))


def log2exp_ideal(x: float) -> int:
    """Unquantized round(-x * log2(e)) in double precision, no clipping."""
    x = float(x)
    if not math.isfinite(x) or x > 0.0:
        raise ContractError(f"log2exp_ideal expects finite x <= 0, got {x!r}")
    return -round(x * math.log2(math.e))
