"""Run and sweep configuration."""

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Union

from expmul_attn.exceptions import ConfigError
from expmul_attn.floatbits import Dtype
from expmul_attn.kernels import KernelKind, KernelTag
from expmul_attn.refmodel import DEFAULT_PWL_SEGMENTS

DEFAULT_DIMS = (16, 64, 256)
DEFAULT_SEQ_LEN = 64
DEFAULT_QUERIES = 8


class OutFormat(enum.Enum):
    JSON = "json"
    CSV = "csv"


def default_kernels() -> List[KernelKind]:
    return [KernelKind(KernelTag.BASELINE_LAZY), KernelKind(KernelTag.FLASH2_EXACT),
            KernelKind(KernelTag.FLASH2_EXPMUL)]


@dataclass(frozen=True)
class RunConfig:
    """One kernel run over one generated instance.

    ``seq_len`` is the key/value count N, ``n_q`` the query count.
    """

    kernel: KernelKind = field(default_factory=lambda: KernelKind(KernelTag.FLASH2_EXPMUL))
    dtype: Dtype = Dtype.FP32
    d: int = 16
    seq_len: int = DEFAULT_SEQ_LEN
    n_q: int = DEFAULT_QUERIES
    seed: int = 0
    scale_by_inv_sqrt_d: bool = False
    out_format: OutFormat = OutFormat.JSON
    stress: bool = False
    pwl_segments: int = DEFAULT_PWL_SEGMENTS

    def __post_init__(self):
        for name in ("d", "seq_len", "n_q", "pwl_segments"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError(f"seed must fit 64 bits, got {self.seed}")


@dataclass
class SweepConfig:
    """Grid of kernels x dtypes x hidden dimensions.

    Loaded from JSON with camelCase keys, e.g.::

        {"dims": [16, 64], "dtypes": ["fp32"], "kernels": ["flash2", "flash2-expmul"],
         "seqLen": 64, "queries": 8, "seed": 1}
    """

    dims: List[int] = field(default_factory=lambda: list(DEFAULT_DIMS))
    dtypes: List[Dtype] = field(default_factory=lambda: [Dtype.FP32, Dtype.BF16])
    kernels: List[KernelKind] = field(default_factory=default_kernels)
    seq_len: int = DEFAULT_SEQ_LEN
    n_q: int = DEFAULT_QUERIES
    seed: int = 0
    stress: bool = False
    scale: bool = False
    pwl_segments: int = DEFAULT_PWL_SEGMENTS
    out_format: OutFormat = OutFormat.CSV

    def __post_init__(self):
        if not self.dims or not self.dtypes or not self.kernels:
            raise ConfigError("sweep grid needs at least one dim, dtype and kernel")

    def cells(self) -> Iterator[RunConfig]:
        """Run configurations in report order: kernel, then dtype, then d."""
        for kernel in self.kernels:
            for dtype in self.dtypes:
                for d in self.dims:
                    yield RunConfig(
                        kernel=kernel,
                        dtype=dtype,
                        d=d,
                        seq_len=self.seq_len,
                        n_q=self.n_q,
                        seed=self.seed,
                        scale_by_inv_sqrt_d=self.scale,
                        out_format=self.out_format,
                        stress=self.stress,
                        pwl_segments=self.pwl_segments,
                    )

    def with_overrides(self, **changes) -> "SweepConfig":
        """Copy with the given non-None fields replaced."""
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "dtypes": [dt.value for dt in self.dtypes],
            "kernels": [k.label for k in self.kernels],
            "seqLen": self.seq_len,
            "queries": self.n_q,
            "seed": self.seed,
            "stress": self.stress,
            "scale": self.scale,
            "pwlSegments": self.pwl_segments,
            "out": self.out_format.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SweepConfig":
        known = {"dims", "dtypes", "kernels", "seqLen", "queries", "seed", "stress", "scale",
                 "pwlSegments", "out"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown sweep config keys: {', '.join(sorted(unknown))}")
        defaults = cls()
        try:
            return cls(
                dims=[int(d) for d in data.get("dims", defaults.dims)],
                dtypes=[Dtype.parse(dt) for dt in data["dtypes"]] if "dtypes" in data else defaults.dtypes,
                kernels=[KernelKind.from_label(k) for k in data["kernels"]] if "kernels" in data else defaults.kernels,
                seq_len=int(data.get("seqLen", defaults.seq_len)),
                n_q=int(data.get("queries", defaults.n_q)),
                seed=int(data.get("seed", defaults.seed)),
                stress=_flag(data, "stress", defaults.stress),
                scale=_flag(data, "scale", defaults.scale),
                pwl_segments=int(data.get("pwlSegments", defaults.pwl_segments)),
                out_format=OutFormat(data.get("out", defaults.out_format.value)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid sweep config: {e}") from None

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SweepConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)


def _flag(data: dict, key: str, default: bool) -> bool:
    value = data.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"sweep config key {key!r} must be true or false, got {value!r}")
    return value
