"""Wire protocol (little-endian), mirrored from the client's documented layout.

Request:
  magic "GSDS" | version u32 = 1 | prompt_len u32 | prompt UTF-8 | kind u8
  (0 = rgb, 1 = normal) | seed u64 | t_min f32 | t_max f32 | height u32 |
  width u32 | channels u32 = 3 | H*W*C f32 row-major in [0, 1]

Response:
  magic "GSDG" | version u32 = 1 | height u32 | width u32 | channels u32 |
  H*W*C f32 gradient
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

REQUEST_MAGIC = b"GSDS"
RESPONSE_MAGIC = b"GSDG"
VERSION = 1
KIND_RGB = 0
KIND_NORMAL = 1


class WireError(ValueError):
    """Malformed request bytes."""


@dataclass
class GradRequest:
    prompt: str
    kind: int
    seed: int
    t_min: float
    t_max: float
    image: np.ndarray  # (H, W, C) float32


def parse_request(data: bytes) -> GradRequest:
    if len(data) < 12 or data[:4] != REQUEST_MAGIC:
        raise WireError("bad magic")
    version, prompt_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    off = 12
    if len(data) < off + prompt_len + 29:
        raise WireError("truncated header")
    prompt = data[off : off + prompt_len].decode("utf-8")
    off += prompt_len
    kind, seed, t_min, t_max, h, w, c = struct.unpack_from("<BQffIII", data, off)
    off += 29
    if kind not in (KIND_RGB, KIND_NORMAL):
        raise WireError(f"unknown channel kind {kind}")
    if not 0 < t_min <= t_max < 1:
        raise WireError("invalid noise-level range")
    expected = h * w * c * 4
    if len(data) != off + expected:
        raise WireError(f"payload size {len(data) - off} != {expected}")
    image = np.frombuffer(data, dtype="<f4", offset=off).reshape(h, w, c)
    return GradRequest(prompt=prompt, kind=kind, seed=seed, t_min=t_min, t_max=t_max, image=image)


def build_response(grad: np.ndarray) -> bytes:
    g = np.ascontiguousarray(grad, dtype="<f4")
    h, w, c = g.shape
    return RESPONSE_MAGIC + struct.pack("<IIII", VERSION, h, w, c) + g.tobytes()


def mock_gradient(req: GradRequest) -> np.ndarray:
    """CI-safe mock: t ~ U[t_min, t_max] from the request seed, w = t^2, and a
    reference image drawn from the same stream; gradient = w * dMSE/dI.

    Byte-identical to the golden fixtures shared with the trainer repo.
    """
    rng = np.random.default_rng(req.seed)
    t = req.t_min + (req.t_max - req.t_min) * rng.random()
    weight = t * t
    ref = rng.random(req.image.shape, dtype=np.float32)
    return (weight * 2.0 / req.image.size * (req.image - ref)).astype(np.float32)
