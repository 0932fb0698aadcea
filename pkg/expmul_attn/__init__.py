"""expmul-attention: ExpMul-fused FlashAttention-2 kernels with an oracle harness."""

__version__ = "0.1.0"

from expmul_attn.exceptions import (
    ExpMulError,
    DomainError,
    ContractError,
    ShapeError,
    ConfigError,
    TensorFileError,
)
from expmul_attn.floatbits import (
    Dtype,
    FloatParts,
    extract,
    compose,
    round_fp32_to_bf16,
    quantize,
)
from expmul_attn.fixedlog import FixedQ, LHat, clip, to_fixed, log2exp
from expmul_attn.expmul import expmul, expmul_counted
from expmul_attn.refmodel import AccuracyReport, compare, oracle_attention, pwl_exp
from expmul_attn.kernels import (
    ExpMode,
    KernelKind,
    KernelStats,
    KernelTag,
    MergedState,
    Precision,
    Tensor,
    attention_baseline_lazy,
    attention_flash2,
    attention_flash2_expmul,
    dot,
    max_update,
    run_kernel,
)
from expmul_attn.config import RunConfig, SweepConfig
from expmul_attn.tensorfile import decode, encode, read_tensor, write_tensor

__all__ = [
    "ExpMulError",
    "DomainError",
    "ContractError",
    "ShapeError",
    "ConfigError",
    "TensorFileError",
    "Dtype",
    "FloatParts",
    "extract",
    "compose",
    "round_fp32_to_bf16",
    "quantize",
    "FixedQ",
    "LHat",
    "clip",
    "to_fixed",
    "log2exp",
    "expmul",
    "expmul_counted",
    "AccuracyReport",
    "compare",
    "oracle_attention",
    "pwl_exp",
    "ExpMode",
    "KernelKind",
    "KernelStats",
    "KernelTag",
    "MergedState",
    "Precision",
    "Tensor",
    "attention_baseline_lazy",
    "attention_flash2",
    "attention_flash2_expmul",
    "dot",
    "max_update",
    "run_kernel",
    "RunConfig",
    "SweepConfig",
    "decode",
    "encode",
    "read_tensor",
    "write_tensor",
]
