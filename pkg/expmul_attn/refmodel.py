"""Double-precision reference attention, PWL exponential and error metrics."""

import functools
import logging
import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Union

import numpy as np

from expmul_attn.exceptions import ConfigError, ContractError, DomainError, ShapeError
from expmul_attn.fixedlog import CLIP_HIGH, CLIP_LOW

if TYPE_CHECKING:
    from expmul_attn.kernels import Tensor

logger = logging.getLogger(__name__)

DEFAULT_PWL_SEGMENTS = 16

# exp() of a double overflows just above 709.78
ORACLE_SCORE_LIMIT = 700.0

RELATIVE_ERROR_GUARD = 1e-30


@dataclass(frozen=True)
class AccuracyReport:
    """Error of a kernel output against the double-precision oracle."""

    max_abs_err: float
    max_rel_err: float
    mean_abs_err: float
    cosine_similarity_min: float
    flushed_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PwlTable:
    """Knots and exact knot values of the piecewise-linear exponential."""

    segments: int
    knots: np.ndarray
    values: np.ndarray


@functools.lru_cache(maxsize=None)
def pwl_table(segments: int = DEFAULT_PWL_SEGMENTS) -> PwlTable:
    """Uniform knot table over [-15, 0]."""
    if segments < 1:
        raise ConfigError(f"pwl segment count must be >= 1, got {segments}")
    knots = np.linspace(CLIP_LOW, CLIP_HIGH, segments + 1)
    values = np.exp(knots)
    knots.setflags(write=False)
    values.setflags(write=False)
    return PwlTable(segments, knots, values)


def pwl_exp(x, segments: int = DEFAULT_PWL_SEGMENTS):
    """Piecewise-linear e**x on [-15, 0]; exact at the knots.

    Accepts a scalar or an array. Callers clip first.
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(arr)) or np.any((arr < CLIP_LOW) | (arr > CLIP_HIGH)):
        raise ContractError(f"pwl_exp expects inputs in [{CLIP_LOW}, {CLIP_HIGH}]")
    table = pwl_table(segments)
    out = np.interp(arr, table.knots, table.values)
    if np.ndim(out) == 0:
        return float(out)
    return out


def pwl_max_relative_error(segments: int = DEFAULT_PWL_SEGMENTS, points: int = 1 << 16) -> float:
    """Largest |pwl_exp(x) / e**x - 1| over a uniform grid on [-15, 0]."""
    grid = np.linspace(CLIP_LOW, CLIP_HIGH, points)
    exact = np.exp(grid)
    return float(np.max(np.abs(pwl_exp(grid, segments) - exact) / exact))


def _as_matrix(t: Union["Tensor", np.ndarray]) -> np.ndarray:
    return np.asarray(getattr(t, "data", t), dtype=np.float64)


def oracle_attention(Q: "Tensor", K: "Tensor", V: "Tensor", scale: bool = False) -> np.ndarray:
    """softmax(Q K^T) V computed directly in double precision.

    No max subtraction; scores beyond +-700 are rejected instead.

    Raises:
        ShapeError: Q/K widths or K/V row counts differ.
        DomainError: K has no rows, or scores leave the safe exp() range.
    """
    q, k, v = _as_matrix(Q), _as_matrix(K), _as_matrix(V)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible shapes Q{q.shape} K{k.shape} V{v.shape}")
    if k.shape[0] == 0:
        raise DomainError("attention over an empty key sequence")
    scores = q @ k.T
    if scale:
        scores = scores / math.sqrt(q.shape[1])
    if np.any(np.abs(scores) > ORACLE_SCORE_LIMIT):
        raise DomainError(f"scores exceed +-{ORACLE_SCORE_LIMIT}; oracle would overflow")
    weights = np.exp(scores)
    return (weights @ v) / weights.sum(axis=1, keepdims=True)


def compare(out: Union["Tensor", np.ndarray], ref: np.ndarray, flushed: int = 0) -> AccuracyReport:
    """Element-wise and per-row metrics of ``out`` against ``ref``."""
    a, r = _as_matrix(out), _as_matrix(ref)
    if a.shape != r.shape:
        raise ShapeError(f"output shape {a.shape} does not match reference {r.shape}")
    diff = np.abs(a - r)
    rel = diff / (np.abs(r) + RELATIVE_ERROR_GUARD)

    dots = np.sum(a * r, axis=1)
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(r, axis=1)
    both_zero = (np.linalg.norm(a, axis=1) == 0) & (np.linalg.norm(r, axis=1) == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosine = np.where(norms > 0, dots / norms, np.where(both_zero, 1.0, 0.0))
    cosine = np.clip(cosine, -1.0, 1.0)

    report = AccuracyReport(
        max_abs_err=float(diff.max()) if diff.size else 0.0,
        max_rel_err=float(rel.max()) if rel.size else 0.0,
        mean_abs_err=float(diff.mean()) if diff.size else 0.0,
        cosine_similarity_min=float(cosine.min()) if cosine.size else 1.0,
        flushed_count=int(flushed),
    )
    logger.debug("compare %s: %s", a.shape, report)
    return report
