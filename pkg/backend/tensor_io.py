# backend/tensor_io.py
"""
RTPT raw tensor files: magic, version and four dimensions (little-endian u32),
followed by little-endian float32 data in (n, c, h, w) order.
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from backend.errors import DatasetIOError, FormatError
from backend.tensor_core import Tensor

MAGIC = b"RTPT"
VERSION = 1
HEADER = struct.Struct("<4sI4I")


def encode_tensor(tensor: Tensor) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, *tensor.shape)
    return header + tensor.data.astype("<f4", copy=False).tobytes(order="C")


def decode_tensor(payload: bytes, source: str = "<bytes>") -> Tensor:
    if len(payload) < HEADER.size:
        raise FormatError(f"{source}: truncated RTPT header")
    magic, version, n, c, h, w = HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported RTPT version {version}")
    expected = n * c * h * w * 4
    body = payload[HEADER.size:]
    if len(body) != expected:
        raise FormatError(f"{source}: payload has {len(body)} bytes, header implies {expected}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(n, c, h, w)
    return Tensor(data)


def save_tensor(tensor: Tensor, path: Union[str, Path]):
    Path(path).write_bytes(encode_tensor(tensor))


def load_tensor(path: Union[str, Path]) -> Tensor:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read tensor file ({e.strerror})", str(path)) from e
    return decode_tensor(payload, str(path))
