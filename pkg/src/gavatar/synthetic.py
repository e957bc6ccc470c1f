"""Synthetic fixtures: desk-sized configs and painted target scenes used by
the self-reconstruction tests and benchmarks."""

from __future__ import annotations

import math

import torch
from torch import Tensor

from .config import TrainConfig
from .scene import Scene, bake, build_scene, pretrain_scene
from .sh import C0


def desk_config(**overrides) -> TrainConfig:
    """Small configuration that trains in minutes on a laptop CPU."""
    values = dict(
        iterations=2000,
        natural_pose_iters=2000,  # natural pose only at desk scale
        zoom_start=2000,
        densify_interval=100,
        mesh_interval=10,
        resolution=256,
        grid_n=16,
        per_primitive=16,
        tet_resolution=24,
        sdf_levels=12,
        hash_log2_table=15,
        pretrain_steps=3000,
        eikonal_samples=512,
        checkpoint_every=1000,
        seed=0,
    )
    values.update(overrides)
    return TrainConfig(**values)


def position_palette(p: Tensor) -> Tensor:
    """Smooth position -> RGB map used to paint synthetic targets."""
    freq = torch.tensor([2.1, 1.7, 2.9], dtype=p.dtype)
    phase = torch.tensor([0.0, 2.1, 4.2], dtype=p.dtype)
    axes = torch.stack([p[:, 0] + p[:, 1], p[:, 1] - p[:, 2], p[:, 2] + p[:, 0]], dim=-1)
    return 0.5 + 0.35 * torch.sin(math.pi * freq * axes + phase)


def paint_scene(scene: Scene) -> None:
    """Bake the scene, drop the Gaussians a trainee would prune, then
    overwrite the baked colors with the analytic palette at each canonical
    position (degree-0 SH only).

    Dropping sub-threshold Gaussians up front keeps the painted target a
    fixed point of the trainee's own pruning schedule; otherwise their
    collective contribution is unreachable after the first prune."""
    from .bank import PRUNE_OPACITY_THRESHOLD, densify_prune
    from .scene import canonical_positions

    bake(scene)
    with torch.no_grad():
        n = scene.bank.n_gaussians
        scene.bank, _, _ = densify_prune(
            scene.bank,
            torch.zeros(n),
            scene.bank.opacities,
            scene.bank.scales,  # pruning only; sizes are irrelevant here
            grad_threshold=float("inf"),
        )
        canon = canonical_positions(scene)
        rgb = position_palette(canon).clamp(0.05, 0.95)
        sh = torch.zeros_like(scene.bank.sh)
        sh.reshape(-1, 3, 16)[:, :, 0] = (rgb - 0.5) / C0
        scene.bank.sh = sh


def painted_target_scene(config: TrainConfig | None = None) -> Scene:
    """Deterministic renderable target: pretrained geometry + painted colors."""
    config = config or desk_config()
    scene = build_scene(config)
    pretrain_scene(scene)
    paint_scene(scene)
    return scene
