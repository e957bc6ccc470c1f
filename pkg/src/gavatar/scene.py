"""Scene: everything learnable plus the template, and the full render path.

Field queries always happen at canonical (rest-pose) world positions, so the
predicted attributes stay pose-independent; `bake` freezes them into the bank
after which rendering touches no field at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .bank import GaussianBank, init_bank, to_world
from .body import BodyParams, Skeleton, TemplateMesh
from .camera import Camera
from .capsule import capsule_sdf, make_skeleton, make_template
from .config import TrainConfig
from .fields import (
    AttributeField,
    OpacityKernel,
    SdfField,
    eval_attributes,
    eval_sdf,
    pretrain_fields,
)
from .rig import CorrectiveNets, Primitives, posed_primitives
from .splat import RenderTarget, Splats, project, rasterize


@dataclass
class Scene:
    template: TemplateMesh
    skeleton: Skeleton
    grid_n: int
    correctives: CorrectiveNets
    bank: GaussianBank
    attr_field: AttributeField
    sdf_field: SdfField
    kernel: OpacityKernel
    theta_n: Tensor  # (J, 3) learnable natural pose
    beta: Tensor  # (J,) learnable shape
    config: TrainConfig

    @property
    def n_primitives(self) -> int:
        return self.grid_n * self.grid_n

    def rest_pose(self) -> BodyParams:
        """Canonical pose: fixed A-pose with the current shape."""
        return BodyParams(pose=torch.zeros_like(self.theta_n), shape=self.beta)

    def natural_pose(self) -> BodyParams:
        return BodyParams(pose=self.theta_n, shape=self.beta)


def build_scene(config: TrainConfig, dtype=torch.float32) -> Scene:
    config.validate()
    torch.manual_seed(config.seed)
    template = make_template(dtype=dtype)
    skeleton = make_skeleton(dtype=dtype)
    n_prims = config.grid_n * config.grid_n
    scene = Scene(
        template=template,
        skeleton=skeleton,
        grid_n=config.grid_n,
        correctives=CorrectiveNets(skeleton.n_joints, n_prims).to(dtype),
        bank=init_bank(n_prims, config.per_primitive, dtype=dtype),
        attr_field=AttributeField(
            n_levels=config.attr_levels, log2_table=config.hash_log2_table
        ).to(dtype),
        sdf_field=SdfField(
            n_levels=config.sdf_levels, log2_table=config.hash_log2_table
        ).to(dtype),
        kernel=OpacityKernel().to(dtype),
        theta_n=torch.zeros(skeleton.n_joints, 3, dtype=dtype),
        beta=torch.zeros(skeleton.n_joints, dtype=dtype),
        config=config,
    )
    return scene


def scene_primitives(scene: Scene, pose: BodyParams) -> Primitives:
    return posed_primitives(
        scene.template, scene.skeleton, scene.grid_n, scene.correctives, pose
    )


def canonical_positions(scene: Scene, prims_rest: Primitives | None = None) -> Tensor:
    """World positions of every bank Gaussian at the canonical rest pose."""
    if prims_rest is None:
        prims_rest = scene_primitives(scene, scene.rest_pose())
    pos, _, _ = to_world(
        scene.bank.positions,
        scene.bank.rotations,
        scene.bank.scales,
        prims_rest,
        scene.bank.primitive_index(),
    )
    return pos


@dataclass
class GaussianAttributes:
    """Local attributes of every bank Gaussian, field-backed or baked."""

    sh: Tensor  # (N, 48)
    rotations: Tensor  # (N, 4) local
    scales: Tensor  # (N, 3) local (split multiplier applied)
    opacities: Tensor  # (N,) clamped to [0, 1]
    canonical: Tensor  # (N, 3) canonical world positions


def query_attributes(scene: Scene, prims_rest: Primitives | None = None) -> GaussianAttributes:
    canon = canonical_positions(scene, prims_rest)
    if scene.bank.baked:
        b = scene.bank
        return GaussianAttributes(
            sh=b.sh, rotations=b.rotations, scales=b.scales,
            opacities=b.opacities, canonical=canon,
        )
    sh, rot, scale = eval_attributes(scene.attr_field, canon)
    sdf = eval_sdf(scene.sdf_field, canon)
    opa = scene.kernel(sdf).clamp(0.0, 1.0)
    return GaussianAttributes(
        sh=sh,
        rotations=rot,
        scales=scale * scene.bank.scale_mult.unsqueeze(-1),
        opacities=opa,
        canonical=canon,
    )


@dataclass
class RenderAux:
    splats: Splats
    world_positions: Tensor
    world_scales: Tensor
    attrs: GaussianAttributes
    primitives: Primitives


def render_scene(
    scene: Scene,
    pose: BodyParams,
    cam: Camera,
    background: Tensor | None = None,
    attrs: GaussianAttributes | None = None,
) -> tuple[RenderTarget, RenderAux]:
    """Full pipeline: rig -> attributes -> world transform -> splatting."""
    if background is None:
        background = torch.tensor(scene.config.background, dtype=scene.bank.positions.dtype)
    prims = scene_primitives(scene, pose)
    if attrs is None:
        attrs = query_attributes(scene)
    world_pos, world_rot, world_scale = to_world(
        scene.bank.positions,
        attrs.rotations,
        attrs.scales,
        prims,
        scene.bank.primitive_index(),
    )
    splats = project(world_pos, world_rot, world_scale, attrs.sh, attrs.opacities, cam)
    rt = rasterize(splats, background, cam.width, cam.height)
    return rt, RenderAux(
        splats=splats,
        world_positions=world_pos,
        world_scales=world_scale,
        attrs=attrs,
        primitives=prims,
    )


def pretrain_scene(scene: Scene, target: str = "body", **kw) -> None:
    """Field pretraining against the analytic body (or sphere) shell."""
    from .capsule import sphere_sdf  # local import keeps module surface tidy

    with torch.no_grad():
        prims = scene_primitives(scene, scene.rest_pose())
        canon = canonical_positions(scene, prims)
        prim_scales = prims.scales[scene.bank.primitive_index()]
    sdf_target = capsule_sdf if target == "body" else sphere_sdf
    pretrain_fields(
        scene.attr_field,
        scene.sdf_field,
        canon,
        prim_scales,
        sdf_target,
        max_steps=scene.config.pretrain_steps,
        seed=scene.config.seed,
        **kw,
    )


def bake(scene: Scene) -> None:
    """Evaluate the fields once and freeze results into the bank; rendering
    and animation afterwards perform no field queries."""
    was = scene.bank.baked
    scene.bank.baked = False
    try:
        with torch.no_grad():
            attrs = query_attributes(scene)
    finally:
        scene.bank.baked = was
    scene.bank.sh = attrs.sh.detach().clone()
    scene.bank.rotations = attrs.rotations.detach().clone()
    scene.bank.scales = attrs.scales.detach().clone()
    scene.bank.opacities = attrs.opacities.detach().clone()
    # the multiplier is folded into the baked scales
    scene.bank.scale_mult = torch.ones_like(scene.bank.scale_mult)
    scene.bank.baked = True
