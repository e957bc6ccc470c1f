"""Byte-level wire protocol for the image-gradient guidance service.

Request (little-endian):
  magic "GSDS" | version u32 = 1 | prompt_len u32 | prompt UTF-8 | kind u8
  (0 = rgb, 1 = normal) | seed u64 | t_min f32 | t_max f32 | height u32 |
  width u32 | channels u32 = 3 | H*W*C f32 row-major RGB in [0, 1]

Response:
  magic "GSDG" | version u32 = 1 | height u32 | width u32 | channels u32 |
  H*W*C f32 gradient
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError

REQUEST_MAGIC = b"GSDS"
RESPONSE_MAGIC = b"GSDG"
VERSION = 1
KIND_RGB = 0
KIND_NORMAL = 1


@dataclass
class SdsRequest:
    prompt: str
    kind: int
    seed: int
    t_min: float
    t_max: float
    image: np.ndarray  # (H, W, C) float32


def encode_request(req: SdsRequest) -> bytes:
    img = np.ascontiguousarray(req.image, dtype="<f4")
    if img.ndim != 3:
        raise ProtocolError("image must be H x W x C")
    h, w, c = img.shape
    prompt = req.prompt.encode("utf-8")
    head = REQUEST_MAGIC + struct.pack("<II", VERSION, len(prompt)) + prompt
    head += struct.pack("<BQffIII", req.kind, req.seed, req.t_min, req.t_max, h, w, c)
    return head + img.tobytes()


def decode_request(data: bytes) -> SdsRequest:
    if len(data) < 12 or data[:4] != REQUEST_MAGIC:
        raise ProtocolError("bad magic")
    version, prompt_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    off = 12
    if len(data) < off + prompt_len + 29:
        raise ProtocolError("truncated header")
    prompt = data[off : off + prompt_len].decode("utf-8")
    off += prompt_len
    kind, seed, t_min, t_max, h, w, c = struct.unpack_from("<BQffIII", data, off)
    off += 29
    expected = h * w * c * 4
    if len(data) != off + expected:
        raise ProtocolError(f"payload size {len(data) - off} != {expected}")
    img = np.frombuffer(data, dtype="<f4", offset=off).reshape(h, w, c)
    return SdsRequest(prompt=prompt, kind=kind, seed=seed, t_min=t_min, t_max=t_max, image=img)


def encode_response(grad: np.ndarray) -> bytes:
    g = np.ascontiguousarray(grad, dtype="<f4")
    h, w, c = g.shape
    return RESPONSE_MAGIC + struct.pack("<IIII", VERSION, h, w, c) + g.tobytes()


def decode_response(data: bytes) -> np.ndarray:
    if len(data) < 20 or data[:4] != RESPONSE_MAGIC:
        raise ProtocolError("bad response magic")
    version, h, w, c = struct.unpack_from("<IIII", data, 4)
    if version != VERSION:
        raise ProtocolError(f"unsupported response version {version}")
    if len(data) != 20 + h * w * c * 4:
        raise ProtocolError("response payload size mismatch")
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(h, w, c).copy()


def mock_gradient(req: SdsRequest) -> np.ndarray:
    """Deterministic mock semantics shared with the service's --mock mode.

    t ~ U[t_min, t_max] from the request seed, w = t^2, reference image from
    the same stream; gradient = w * d(MSE(I, ref))/dI.
    """
    rng = np.random.default_rng(req.seed)
    t = req.t_min + (req.t_max - req.t_min) * rng.random()
    w = t * t
    ref = rng.random(req.image.shape, dtype=np.float32)
    return (w * 2.0 / req.image.size * (req.image - ref)).astype(np.float32)
