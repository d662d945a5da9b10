"""TNSR tensor dump format.

Layout: magic b"TNSR", u32 version (1), four u32 dims (n, c, h, w), then
n*c*h*w little-endian float32 values.
"""
import struct
from pathlib import Path

import numpy as np

from app.core.errors import ConfigError, DataFileError
from app.services.tensor_ops import Tensor, as_tensor

MAGIC = b"TNSR"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")


def encode_tensor(t: Tensor) -> bytes:
    if t.ndim != 4:
        raise ConfigError(f"TNSR needs a 4-D tensor, got {t.ndim}-D")
    header = HEADER.pack(MAGIC, VERSION, *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> Tensor:
    if len(buf) < HEADER.size:
        raise DataFileError(f"{source}: truncated TNSR header ({len(buf)} bytes)")
    magic, version, n, c, h, w = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DataFileError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise DataFileError(f"{source}: unsupported TNSR version {version}")
    count = n * c * h * w
    expected = HEADER.size + 4 * count
    if len(buf) != expected:
        raise DataFileError(f"{source}: payload is {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=HEADER.size)
    return as_tensor(data.reshape(n, c, h, w).astype(np.float32), source)


def write_tensor(path: Path | str, t: Tensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(t))
    return path


def read_tensor(path: Path | str) -> Tensor:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataFileError(f"cannot read tensor {path}: {e}") from e
    return decode_tensor(buf, str(path))
