"""Pluggable image-space supervision: photometric oracle and remote SDS.

Every guidance implementation maps (rendered image, context) to dL/dI with
the image's shape; the training loop treats the returned tensor as a detached
upstream gradient.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests
import torch
from torch import Tensor

from . import protocol
from .errors import GuidanceConnectionError, GuidanceError, ParameterError, ProtocolError

log = logging.getLogger(__name__)

ENDPOINT_PATH = "/v1/sds-grad"


@dataclass
class GuidanceContext:
    prompt: str = ""
    kind: str = "rgb"  # rgb | normal
    t_min: float = 0.02
    t_max: float = 0.98
    seed: int = 0
    reference: Tensor | None = None  # photometric target for this view

    def validate(self, remote: bool = False) -> None:
        if not (0 < self.t_min <= self.t_max < 1):
            raise ParameterError("noise range must satisfy 0 < t_min <= t_max < 1")
        if self.kind not in ("rgb", "normal"):
            raise ParameterError(f"unknown channel kind {self.kind!r}")
        if remote and not self.prompt:
            raise ParameterError("remote SDS requires a non-empty prompt")


def photometric_grad(image: Tensor, reference: Tensor) -> Tensor:
    """Gradient of mean squared error between image and reference."""
    if image.shape != reference.shape:
        raise ParameterError(
            f"image {tuple(image.shape)} and reference {tuple(reference.shape)} differ"
        )
    return 2.0 * (image - reference) / image.numel()


def sds_weight(t: float) -> float:
    """Mock linear-schedule weight w(t) = t^2; the real schedule lives
    server-side and responses arrive pre-multiplied."""
    if not 0 < t < 1:
        raise ParameterError("t must be in (0, 1)")
    return t * t


class PhotometricGuidance:
    """Offline oracle: supervises against per-view reference images."""

    supports_normal = False

    def image_grad(self, image: Tensor, ctx: GuidanceContext) -> Tensor:
        ctx.validate()
        if ctx.reference is None:
            raise GuidanceError("photometric guidance needs ctx.reference")
        return photometric_grad(image, ctx.reference.to(image.dtype))


class RemoteSdsClient:
    """HTTP client for the SDS gradient service."""

    supports_normal = True

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 3,
                 backoff: float = 0.2):
        self.endpoint = endpoint.rstrip("/") + ENDPOINT_PATH
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def image_grad(self, image: Tensor, ctx: GuidanceContext) -> Tensor:
        ctx.validate(remote=True)
        req = protocol.SdsRequest(
            prompt=ctx.prompt,
            kind=protocol.KIND_NORMAL if ctx.kind == "normal" else protocol.KIND_RGB,
            seed=ctx.seed,
            t_min=ctx.t_min,
            t_max=ctx.t_max,
            image=image.detach().cpu().numpy().astype(np.float32),
        )
        body = protocol.encode_request(req)
        last = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(
                    self.endpoint,
                    data=body,
                    headers={"Content-Type": "application/octet-stream"},
                    timeout=self.timeout,
                )
                break
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = exc
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        else:
            raise GuidanceConnectionError(f"guidance endpoint unreachable: {last}")

        if resp.status_code != 200:
            raise GuidanceError(
                f"guidance server error {resp.status_code}: {resp.content[:200].decode('utf-8', 'replace')}"
            )
        grad = protocol.decode_response(resp.content)
        if grad.shape != tuple(image.shape):
            raise ProtocolError(
                f"gradient shape {grad.shape} does not match image {tuple(image.shape)}"
            )
        return torch.from_numpy(grad).to(image.dtype)


class MockSdsServer:
    """In-process guidance server for tests and offline smoke runs.

    With `reference` set it behaves as the echo mock: the response is exactly
    photometric_grad(image, reference). Otherwise it follows the seeded mock
    semantics shared with the service's --mock mode.
    """

    def __init__(self, reference: Tensor | None = None, max_side: int = 1024,
                 fail_with: int = 0):
        ref = None if reference is None else reference.detach().cpu().numpy().astype(np.float32)
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # silence request logging
                pass

            def do_POST(self):
                if self.path != ENDPOINT_PATH:
                    self.send_error(404)
                    return
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                if outer.fail_with:
                    self._send(outer.fail_with, b"injected failure")
                    return
                try:
                    req = protocol.decode_request(body)
                except ProtocolError as exc:
                    self._send(400, str(exc).encode())
                    return
                h, w, _ = req.image.shape
                if max(h, w) > outer.max_side:
                    self._send(422, b"image side over limit")
                    return
                try:
                    if ref is not None:
                        if ref.shape != req.image.shape:
                            self._send(422, b"reference shape mismatch")
                            return
                        grad = (2.0 / req.image.size) * (req.image - ref)
                    else:
                        grad = protocol.mock_gradient(req)
                except Exception as exc:  # model failure path
                    self._send(500, str(exc).encode())
                    return
                out = protocol.encode_response(grad.astype(np.float32))
                self.send_response(200)
                self.send_header("Content-Type", "application/octet-stream")
                self.send_header("Content-Length", str(len(out)))
                self.end_headers()
                self.wfile.write(out)

            def _send(self, code: int, message: bytes):
                self.send_response(code)
                self.send_header("Content-Type", "text/plain; charset=utf-8")
                self.send_header("Content-Length", str(len(message)))
                self.end_headers()
                self.wfile.write(message)

        self.max_side = max_side
        self.fail_with = fail_with
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        return f"http://127.0.0.1:{self._server.server_address[1]}"

    def __enter__(self) -> "MockSdsServer":
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)
