"""FastAPI application implementing the gradient endpoint.

One request is processed at a time (the model is the bottleneck); FastAPI
queues the rest.
"""

from __future__ import annotations

import logging
import threading

from fastapi import FastAPI, Request, Response

from .model import DiffusionBackend, ModelError, ServiceConfig
from .protocol import WireError, build_response, mock_gradient, parse_request

log = logging.getLogger(__name__)


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="sds-service", docs_url=None, redoc_url=None)
    backend = None if config.mock else DiffusionBackend(config)
    lock = threading.Lock()

    @app.post("/v1/sds-grad")
    async def sds_grad(request: Request) -> Response:
        body = await request.body()
        try:
            req = parse_request(body)
        except WireError as exc:
            return Response(str(exc), status_code=400, media_type="text/plain")
        if max(req.image.shape[0], req.image.shape[1]) > config.max_side:
            return Response(
                f"image side over limit {config.max_side}", status_code=422,
                media_type="text/plain",
            )
        try:
            with lock:
                grad = mock_gradient(req) if backend is None else backend.gradient(req)
        except Exception as exc:  # model failure
            log.exception("gradient computation failed")
            return Response(str(exc), status_code=500, media_type="text/plain")
        return Response(
            build_response(grad), media_type="application/octet-stream"
        )

    @app.get("/healthz")
    async def healthz() -> dict:
        return {"ok": True, "mock": backend is None}

    return app
