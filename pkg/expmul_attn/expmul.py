"""Fused ExpMul operator: ``e**x * v`` as a biased-exponent decrement."""

import logging
from typing import Tuple

import numpy as np

from expmul_attn.fixedlog import log2exp
from expmul_attn.floatbits import Dtype, compose_array, extract_array

logger = logging.getLogger(__name__)


def expmul_counted(x: float, v, dtype: Dtype = Dtype.FP32) -> Tuple[np.ndarray, int]:
    """Scale ``v`` by 2**-log2exp(x) and count exponent-underflow flushes.

    Every nonzero element keeps its sign and mantissa; its biased exponent
    drops by L. Elements whose exponent would reach zero or below become
    +0.0 and are counted as flushed.

    Raises:
        ContractError: ``x`` is positive.
        DomainError: ``v`` holds NaN or infinity.
    """
    lhat = log2exp(x)
    sign, exponent, mantissa = extract_array(v, dtype)
    if lhat == 0:
        return compose_array(sign, exponent, mantissa, dtype), 0
    shifted = exponent.astype(np.int64) - lhat
    flushed = int(np.count_nonzero((exponent > 0) & (shifted <= 0)))
    out = compose_array(sign, shifted, mantissa, dtype)
    if flushed:
        logger.debug("expmul x=%r L=%d flushed %d of %d elements", x, lhat, flushed, out.size)
    return out, flushed


def expmul(x: float, v, dtype: Dtype = Dtype.FP32) -> np.ndarray:
    """``e**x * v`` approximated as ``v * 2**-log2exp(x)``; output dtype is ``dtype``."""
    return expmul_counted(x, v, dtype)[0]
