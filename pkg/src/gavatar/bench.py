"""Playback timing and the rasterizer throughput sweep."""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch

from .bank import to_world
from .body import BodyParams, compute_anchors, skin_mesh
from .camera import Camera, look_at
from .rig import generate_primitives
from .scene import Scene, query_attributes
from .splat import project, rasterize


@dataclass
class FrameTiming:
    lbs_ms: float
    primitives_ms: float
    transform_ms: float
    raster_ms: float

    @property
    def total_ms(self) -> float:
        return self.lbs_ms + self.primitives_ms + self.transform_ms + self.raster_ms

    def as_dict(self) -> dict:
        return {
            "lbs_ms": self.lbs_ms,
            "primitives_ms": self.primitives_ms,
            "transform_ms": self.transform_ms,
            "raster_ms": self.raster_ms,
            "total_ms": self.total_ms,
        }


@torch.no_grad()
def render_frame_timed(scene: Scene, pose: BodyParams, cam: Camera,
                       background: torch.Tensor | None = None):
    """Per-stage timing of one playback frame (baked or field-backed)."""
    if background is None:
        background = torch.tensor(scene.config.background, dtype=scene.bank.positions.dtype)
    t0 = time.perf_counter()
    posed = skin_mesh(scene.template, scene.skeleton, pose)
    t1 = time.perf_counter()
    anchors = compute_anchors(posed, scene.grid_n)
    prims = generate_primitives(anchors, scene.correctives, pose)
    t2 = time.perf_counter()
    attrs = query_attributes(scene)
    world_pos, world_rot, world_scale = to_world(
        scene.bank.positions, attrs.rotations, attrs.scales,
        prims, scene.bank.primitive_index(),
    )
    t3 = time.perf_counter()
    splats = project(world_pos, world_rot, world_scale, attrs.sh, attrs.opacities, cam)
    rt = rasterize(splats, background, cam.width, cam.height)
    t4 = time.perf_counter()
    timing = FrameTiming(
        lbs_ms=(t1 - t0) * 1000,
        primitives_ms=(t2 - t1) * 1000,
        transform_ms=(t3 - t2) * 1000,
        raster_ms=(t4 - t3) * 1000,
    )
    return rt, timing


@torch.no_grad()
def synthetic_splat_scene(n: int, seed: int = 0, dtype=torch.float32):
    """Deterministic ball of small Gaussians for throughput rows."""
    gen = torch.Generator().manual_seed(seed)
    pos = torch.randn(n, 3, generator=gen, dtype=dtype) * 0.35
    rot = torch.zeros(n, 4, dtype=dtype)
    rot[:, 0] = 1.0
    scale = torch.full((n, 3), 0.004, dtype=dtype)
    sh = torch.zeros(n, 48, dtype=dtype)
    sh.reshape(n, 3, 16)[:, :, 0] = torch.rand(n, 3, generator=gen, dtype=dtype) - 0.5
    opa = torch.rand(n, generator=gen, dtype=dtype) * 0.8 + 0.2
    return pos, rot, scale, sh, opa


@torch.no_grad()
def bench_row(n: int, width: int, height: int, seed: int = 0,
              repeats: int = 2) -> dict:
    """One CSV row: rasterizer-only and full-frame milliseconds."""
    pos, rot, scale, sh, opa = synthetic_splat_scene(n, seed)
    cam = look_at((0.0, 0.0, 3.5), (0.0, 0.0, 0.0), width, height)
    bg = torch.zeros(3)
    best_raster = float("inf")
    best_total = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        splats = project(pos, rot, scale, sh, opa, cam)
        t1 = time.perf_counter()
        rasterize(splats, bg, width, height)
        t2 = time.perf_counter()
        best_raster = min(best_raster, (t2 - t1) * 1000)
        best_total = min(best_total, (t2 - t0) * 1000)
    fps = 1000.0 / best_total if best_total > 0 else float("inf")
    return {
        "N": n, "W": width, "H": height,
        "ms_raster": round(best_raster, 3),
        "ms_total": round(best_total, 3),
        "fps": round(fps, 3),
    }
