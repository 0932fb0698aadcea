"""Attention kernels over a block of queries and streamed key/value rows.

Three kernels share one per-query driver:

- ``attention_baseline_lazy``: two passes, softmax division after the loop.
- ``attention_flash2``: one pass with online max and rescaling (merged
  ``[l, o]`` state).
- ``attention_flash2_expmul``: the same loop with both exponential-times-vector
  products replaced by the ExpMul operator.

FP32 kernels compute and store in FP32. BF16 kernels compute every step in
FP32 and round the stored result back to BF16 once per named operation.
Queries are independent; the key loop is strictly sequential.
"""

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from expmul_attn.exceptions import ConfigError, DomainError, ShapeError
from expmul_attn.expmul import expmul_counted
from expmul_attn.fixedlog import clip
from expmul_attn.floatbits import Dtype, quantize, quantize_scalar, require_finite
from expmul_attn.refmodel import DEFAULT_PWL_SEGMENTS, pwl_exp

logger = logging.getLogger(__name__)


class ExpMode(enum.Enum):
    """How the exact kernels evaluate e**x."""

    ACCURATE = "accurate"
    PWL = "pwl"


class KernelTag(enum.Enum):
    BASELINE_LAZY = "baseline"
    FLASH2_EXACT = "flash2"
    FLASH2_EXPMUL = "flash2-expmul"


class Precision(enum.Enum):
    """NATIVE follows the dtype policy; DOUBLE lifts all arithmetic to float64."""

    NATIVE = "native"
    DOUBLE = "double"


@dataclass(frozen=True)
class KernelKind:
    """A kernel choice; only the exact kernels take an exponential mode."""

    tag: KernelTag
    exp_mode: Optional[ExpMode] = None

    def __post_init__(self):
        if self.tag is KernelTag.FLASH2_EXPMUL:
            if self.exp_mode is not None:
                raise ConfigError("flash2-expmul does not take an exponential mode")
        elif self.exp_mode is None:
            object.__setattr__(self, "exp_mode", ExpMode.ACCURATE)

    @classmethod
    def parse(cls, name: str, exp: Optional[str] = None) -> "KernelKind":
        try:
            tag = KernelTag(name)
        except ValueError:
            choices = ", ".join(t.value for t in KernelTag)
            raise ConfigError(f"unknown kernel {name!r} (expected one of {choices})") from None
        if tag is KernelTag.FLASH2_EXPMUL:
            return cls(tag)
        try:
            return cls(tag, ExpMode(exp) if exp else ExpMode.ACCURATE)
        except ValueError:
            raise ConfigError(f"unknown exponential mode {exp!r}") from None

    @classmethod
    def from_label(cls, label: str) -> "KernelKind":
        """Inverse of :attr:`label`."""
        base, pwl, _ = label.partition("-pwl")
        if not pwl:
            return cls.parse(label)
        if _ or base == KernelTag.FLASH2_EXPMUL.value:
            raise ConfigError(f"unknown kernel label {label!r}")
        return cls.parse(base, ExpMode.PWL.value)

    @property
    def label(self) -> str:
        """Report name, e.g. ``flash2`` or ``baseline-pwl``."""
        if self.exp_mode is ExpMode.PWL:
            return f"{self.tag.value}-pwl"
        return self.tag.value


@dataclass(frozen=True)
class Tensor:
    """Row-major matrix of finite values tagged with its storage dtype."""

    data: np.ndarray
    dtype: Dtype = Dtype.FP32

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeError(f"tensor must be 2-D, got shape {self.data.shape}")
        require_finite(self.data, "tensor")

    @classmethod
    def from_array(cls, values, dtype: Dtype = Dtype.FP32) -> "Tensor":
        """Round ``values`` to ``dtype``; NaN, infinity or overflow is rejected."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        require_finite(arr, "tensor input")
        data = quantize(arr, dtype)
        require_finite(data, f"tensor rounded to {dtype.value}")
        data.setflags(write=False)
        return cls(data, dtype)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.data[i]

    def select_rows(self, indices) -> "Tensor":
        return Tensor(self.data[np.asarray(indices)], self.dtype)


@dataclass
class MergedState:
    """Running maximum ``m`` and the merged vector ``[l, o]``."""

    m: float
    merged: np.ndarray

    @classmethod
    def initial(cls, d: int, float_type=np.float32) -> "MergedState":
        return cls(float_type(-math.inf), np.zeros(d + 1, dtype=float_type))

    @property
    def ell(self):
        return self.merged[0]

    @property
    def out(self) -> np.ndarray:
        return self.merged[1:]


@dataclass
class KernelStats:
    """Counters accumulated over a kernel run."""

    flushed: int = 0
    steps: int = 0

    def add(self, other: "KernelStats") -> None:
        self.flushed += other.flushed
        self.steps += other.steps


@dataclass(frozen=True)
class _Arithmetic:
    """Rounding policy of one kernel run."""

    dtype: Dtype
    precision: Precision = Precision.NATIVE

    @property
    def float_type(self):
        return np.float64 if self.precision is Precision.DOUBLE else np.float32

    def scalar(self, v):
        if self.precision is Precision.DOUBLE:
            return float(v)
        return quantize_scalar(v, self.dtype)

    def vector(self, values) -> np.ndarray:
        if self.precision is Precision.DOUBLE:
            return np.asarray(values, dtype=np.float64)
        return quantize(values, self.dtype)


def dot(q, k, dtype: Dtype = Dtype.FP32, precision: Precision = Precision.NATIVE):
    """Unscaled dot product, accumulated in FP32 (or float64 when lifted)."""
    q = np.asarray(q)
    k = np.asarray(k)
    if q.ndim != 1 or q.shape != k.shape:
        raise ShapeError(f"dot of mismatched vectors {q.shape} and {k.shape}")
    if precision is Precision.DOUBLE:
        return float(np.dot(q.astype(np.float64), k.astype(np.float64)))
    return quantize_scalar(np.dot(q.astype(np.float32), k.astype(np.float32)), dtype)


def max_update(m_prev, s):
    """Running maximum; on a tie the previous value is kept."""
    if math.isnan(float(s)):
        raise DomainError("score is NaN")
    return s if s > m_prev else m_prev


def _check_inputs(Q: Tensor, K: Tensor, V: Tensor) -> None:
    if not (Q.dtype is K.dtype is V.dtype):
        raise ShapeError(f"mixed dtypes {Q.dtype.value}/{K.dtype.value}/{V.dtype.value}")
    if Q.cols != K.cols:
        raise ShapeError(f"query width {Q.cols} != key width {K.cols}")
    if K.rows != V.rows:
        raise ShapeError(f"{K.rows} keys but {V.rows} values")
    if K.rows == 0:
        raise DomainError("attention over an empty key sequence")


def _scorer(arith: _Arithmetic, d: int, scale: bool) -> Callable:
    inv_sqrt_d = 1.0 / math.sqrt(d)
    if arith.precision is Precision.NATIVE:
        inv_sqrt_d = np.float32(inv_sqrt_d)

    def score(q, k):
        s = dot(q, k, arith.dtype, arith.precision)
        return arith.scalar(s * inv_sqrt_d) if scale else s

    return score


def _exponential(arith: _Arithmetic, mode: ExpMode, segments: int) -> Callable:
    def exp(x):
        if mode is ExpMode.ACCURATE:
            y = math.exp(float(x))
        else:
            y = pwl_exp(clip(x), segments)
        return arith.scalar(y)

    return exp


def _run_queries(
    name: str,
    per_query: Callable[[np.ndarray], Tuple[np.ndarray, KernelStats]],
    Q: Tensor,
    out_cols: int,
    out_type,
    workers: int,
    stats: Optional[KernelStats],
) -> np.ndarray:
    logger.debug("%s: %d queries, workers=%d", name, Q.rows, workers)
    queries = [Q.row(j) for j in range(Q.rows)]
    if workers > 1 and Q.rows > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results: List = list(pool.map(per_query, queries))
    else:
        results = [per_query(q) for q in queries]
    out = np.zeros((Q.rows, out_cols), dtype=out_type)
    for j, (row, query_stats) in enumerate(results):
        out[j] = row
        if stats is not None:
            stats.add(query_stats)
    return out


def attention_baseline_lazy(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    exp_mode: ExpMode = ExpMode.ACCURATE,
    *,
    precision: Precision = Precision.NATIVE,
    scale: bool = False,
    pwl_segments: int = DEFAULT_PWL_SEGMENTS,
    workers: int = 1,
    stats: Optional[KernelStats] = None,
) -> Tensor:
    """Two-pass attention with the softmax division deferred to the end."""
    _check_inputs(Q, K, V)
    arith = _Arithmetic(Q.dtype, precision)
    score = _scorer(arith, Q.cols, scale)
    exp = _exponential(arith, exp_mode, pwl_segments)
    keys = K.data.astype(arith.float_type)
    values = V.data.astype(arith.float_type)

    def per_query(q):
        scores = [score(q, k) for k in keys]
        m = arith.scalar(-math.inf)
        for s in scores:
            m = max_update(m, s)
        ell = arith.scalar(0.0)
        o = np.zeros(V.cols, dtype=arith.float_type)
        for s, v in zip(scores, values):
            w = exp(s - m)
            ell = arith.scalar(ell + w)
            o = arith.vector(o + w * v)
        return arith.vector(o / ell), KernelStats(steps=len(scores))

    data = _run_queries("baseline", per_query, Q, V.cols, arith.float_type, workers, stats)
    return Tensor(data, Q.dtype)


def attention_flash2(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    exp_mode: ExpMode = ExpMode.ACCURATE,
    *,
    precision: Precision = Precision.NATIVE,
    scale: bool = False,
    pwl_segments: int = DEFAULT_PWL_SEGMENTS,
    workers: int = 1,
    stats: Optional[KernelStats] = None,
) -> Tensor:
    """Single-pass FlashAttention-2 with delayed division.

    The normalizer rides in slot 0 of the merged state, so
    ``o*_i = o*_{i-1} e^(m_{i-1}-m_i) + [1, v_i] e^(s_i-m_i)`` updates both.
    """
    _check_inputs(Q, K, V)
    arith = _Arithmetic(Q.dtype, precision)
    score = _scorer(arith, Q.cols, scale)
    exp = _exponential(arith, exp_mode, pwl_segments)
    keys = K.data.astype(arith.float_type)
    merged_values = _merged_values(V, arith.float_type)

    def per_query(q):
        state = MergedState.initial(V.cols, arith.float_type)
        for k, v_star in zip(keys, merged_values):
            s = score(q, k)
            m = max_update(state.m, s)
            rescale = exp(state.m - m)
            weight = exp(s - m)
            state = MergedState(m, arith.vector(state.merged * rescale + v_star * weight))
        return arith.vector(state.out / state.ell), KernelStats(steps=len(keys))

    data = _run_queries("flash2", per_query, Q, V.cols, arith.float_type, workers, stats)
    return Tensor(data, Q.dtype)


def attention_flash2_expmul(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    *,
    scale: bool = False,
    workers: int = 1,
    stats: Optional[KernelStats] = None,
) -> Tensor:
    """FlashAttention-2 with both rescaling products done by ExpMul.

    ``o*_i = ExpMul(m_{i-1} - m_i, o*_{i-1}) + ExpMul(s_i - m_i, [1, v_i])``;
    the sum is taken in FP32 and stored in the tensor dtype.
    """
    _check_inputs(Q, K, V)
    dtype = Q.dtype
    arith = _Arithmetic(dtype)
    score = _scorer(arith, Q.cols, scale)
    keys = K.data.astype(np.float32)
    merged_values = _merged_values(V, np.float32)

    def per_query(q):
        state = MergedState.initial(V.cols)
        state.m = arith.scalar(-math.inf)
        query_stats = KernelStats()
        for k, v_star in zip(keys, merged_values):
            s = score(q, k)
            m = max_update(state.m, s)
            carried, carried_flushed = expmul_counted(state.m - m, state.merged, dtype)
            term, term_flushed = expmul_counted(s - m, v_star, dtype)
            with np.errstate(over="ignore"):
                merged = quantize(carried + term, dtype)
            if not np.all(np.isfinite(merged)):
                raise DomainError(
                    f"flash2-expmul accumulator overflowed {dtype.value.upper()} "
                    f"after {query_stats.steps + 1} keys"
                )
            state = MergedState(m, merged)
            query_stats.flushed += carried_flushed + term_flushed
            query_stats.steps += 1
        return quantize(state.out / state.ell, dtype), query_stats

    data = _run_queries("flash2-expmul", per_query, Q, V.cols, np.float32, workers, stats)
    if stats is not None and stats.flushed:
        logger.debug("flash2-expmul: %d flush-to-zero events", stats.flushed)
    return Tensor(data, dtype)


def _merged_values(V: Tensor, float_type) -> np.ndarray:
    """Rows ``v*_i = [1, v_i]``."""
    ones = np.ones((V.rows, 1), dtype=float_type)
    return np.hstack([ones, V.data.astype(float_type)])


def run_kernel(
    kind: KernelKind,
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    *,
    scale: bool = False,
    pwl_segments: int = DEFAULT_PWL_SEGMENTS,
    workers: int = 1,
    stats: Optional[KernelStats] = None,
) -> Tensor:
    """Dispatch to the kernel named by ``kind`` in native precision."""
    if kind.tag is KernelTag.FLASH2_EXPMUL:
        return attention_flash2_expmul(Q, K, V, scale=scale, workers=workers, stats=stats)
    kernel = attention_baseline_lazy if kind.tag is KernelTag.BASELINE_LAZY else attention_flash2
    return kernel(
        Q, K, V, kind.exp_mode,
        scale=scale, pwl_segments=pwl_segments, workers=workers, stats=stats,
    )
