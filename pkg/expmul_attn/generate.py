"""Deterministic Q/K/V instances.

Nominal instances draw Q and K uniformly from [-a, a) with a = sqrt(30 / d),
so every score satisfies |s| <= 30, and V uniformly from [-1, 1).

Stress instances put every query and key on one shared sign pattern so
scores spread over roughly [-30, 30] (forcing s - m below the -15 clip
point), and scale each value element by 2**-k with k uniform in [0, 126]
so ExpMul exponent decrements underflow.
"""

import logging
import math
from typing import Tuple

import numpy as np

from expmul_attn.config import RunConfig
from expmul_attn.kernels import Tensor

logger = logging.getLogger(__name__)

SCORE_BOUND = 30.0
STRESS_MAX_SHIFT = 126


def generate_instance(config: RunConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """Build (Q, K, V) from ``config.seed`` with numpy's PCG64 generator."""
    rng = np.random.default_rng(config.seed)
    d, n, n_q = config.d, config.seq_len, config.n_q
    amplitude = math.sqrt(SCORE_BOUND / d)

    if config.stress:
        pattern = rng.choice([-1.0, 1.0], size=d)
        q = pattern * rng.uniform(0.5, 1.0, size=(n_q, d)) * amplitude
        spread = rng.uniform(-1.0, 1.0, size=(n, 1))
        k = spread * pattern * rng.uniform(0.5, 1.0, size=(n, d)) * amplitude
        shifts = rng.integers(0, STRESS_MAX_SHIFT + 1, size=(n, d))
        v = np.ldexp(rng.uniform(-1.0, 1.0, size=(n, d)), (-shifts).astype(np.int32))
    else:
        q = rng.uniform(-1.0, 1.0, size=(n_q, d)) * amplitude
        k = rng.uniform(-1.0, 1.0, size=(n, d)) * amplitude
        v = rng.uniform(-1.0, 1.0, size=(n, d))

    logger.debug("generated instance seed=%d d=%d N=%d n_q=%d stress=%s",
                 config.seed, d, n, n_q, config.stress)
    return (
        Tensor.from_array(q, config.dtype),
        Tensor.from_array(k, config.dtype),
        Tensor.from_array(v, config.dtype),
    )
