"""Service entry point: sds-service --mock --port 8040."""

from __future__ import annotations

import argparse
import logging

import uvicorn

from .app import create_app
from .model import ServiceConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sds-service", description=__doc__)
    parser.add_argument("--model", default="", help="diffusion model id or local path")
    parser.add_argument("--port", type=int, default=8040)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--mock", action="store_true",
                        help="serve deterministic mock gradients (no model needed)")
    parser.add_argument("--max-side", type=int, default=1024)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--guidance-scale", type=float, default=7.5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    if not args.mock and not args.model:
        build_parser().error("--model is required unless --mock is set")
    config = ServiceConfig(
        model=args.model, device=args.device, guidance_scale=args.guidance_scale,
        port=args.port, mock=args.mock, max_side=args.max_side,
    )
    uvicorn.run(create_app(config), host=args.host, port=config.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
