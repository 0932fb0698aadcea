"""Bit-exact binary tensor files.

Layout (all little-endian)::

    magic     4 bytes  b"ATNT"
    version   u16      1
    dtype     u16      0 = fp32, 1 = bf16
    rows      u32
    cols      u32
    payload   rows * cols raw IEEE patterns, row-major (4 or 2 bytes each)
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from expmul_attn.exceptions import ConfigError, ContractError, TensorFileError
from expmul_attn.floatbits import Dtype, from_bits_array, to_bits_array
from expmul_attn.kernels import Tensor

MAGIC = b"ATNT"
VERSION = 1

_HEADER = struct.Struct("<4sHHII")
_WIRE_TYPES = {Dtype.FP32: "<u4", Dtype.BF16: "<u2"}

PathLike = Union[str, Path]


def encode(tensor: Tensor) -> bytes:
    """Serialize ``tensor`` to the tensor file format."""
    bits = to_bits_array(tensor.data, tensor.dtype)
    payload = bits.astype(_WIRE_TYPES[tensor.dtype]).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, tensor.dtype.code, tensor.rows, tensor.cols)
    return header + payload


def decode(blob: bytes, path: PathLike = "<bytes>") -> Tensor:
    """Parse a tensor file image; ``path`` only labels error messages.

    Raises:
        TensorFileError: bad magic, version, dtype code, payload length,
            or a payload holding NaN/infinity.
    """
    if len(blob) < _HEADER.size:
        raise TensorFileError(path, f"truncated header ({len(blob)} bytes)")
    magic, version, code, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise TensorFileError(path, f"bad magic {magic!r} (expected {MAGIC!r})")
    if version != VERSION:
        raise TensorFileError(path, f"unsupported version {version}")
    try:
        dtype = Dtype.from_code(code)
    except ConfigError as e:
        raise TensorFileError(path, str(e)) from None

    payload = blob[_HEADER.size:]
    expected = rows * cols * dtype.itemsize
    if len(payload) != expected:
        raise TensorFileError(path, f"payload is {len(payload)} bytes, expected {expected}")

    bits = np.frombuffer(payload, dtype=_WIRE_TYPES[dtype]).astype(np.uint32)
    values = from_bits_array(bits, dtype).reshape(rows, cols)
    if not np.all(np.isfinite(values)):
        raise TensorFileError(path, "payload contains NaN or infinite values")
    values.setflags(write=False)
    return Tensor(values, dtype)


def write_tensor(path: PathLike, tensor: Tensor) -> None:
    try:
        blob = encode(tensor)
    except ContractError as e:
        raise TensorFileError(path, str(e)) from None
    Path(path).write_bytes(blob)


def read_tensor(path: PathLike) -> Tensor:
    return decode(Path(path).read_bytes(), path)
