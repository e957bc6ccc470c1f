"""Tensor <-> bytes encoding shared by the checkpoint and template formats.

Blob layout: dtype tag u8 | ndim u8 | dims u64 * ndim | raw little-endian data.
"""

from __future__ import annotations

import struct

import numpy as np
import torch
from torch import Tensor

from ..errors import CheckpointError

_TAGS = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1", 4: "<u4"}
_DTYPE_TAG = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
    torch.bool: 3,
}


def encode_array(t: Tensor) -> bytes:
    if t.dtype not in _DTYPE_TAG:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    tag = _DTYPE_TAG[t.dtype]
    arr = t.detach().cpu()
    if t.dtype == torch.bool:
        arr = arr.to(torch.uint8)
    data = np.ascontiguousarray(arr.numpy()).astype(_TAGS[tag], copy=False)
    head = struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + data.tobytes()


def decode_array(blob: bytes) -> Tensor:
    if len(blob) < 2:
        raise CheckpointError("array blob truncated")
    tag, ndim = struct.unpack_from("<BB", blob, 0)
    if tag not in _TAGS:
        raise CheckpointError(f"unknown array dtype tag {tag}")
    off = 2
    if len(blob) < off + 8 * ndim:
        raise CheckpointError("array blob truncated in dims")
    dims = struct.unpack_from(f"<{ndim}Q", blob, off)
    off += 8 * ndim
    arr = np.frombuffer(blob, dtype=_TAGS[tag], offset=off)
    expect = int(np.prod(dims)) if ndim else 1
    if arr.size != expect:
        raise CheckpointError("array payload size mismatch")
    return torch.from_numpy(arr.reshape(dims).copy())
