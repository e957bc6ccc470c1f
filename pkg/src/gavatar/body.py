"""Parametric skinned body: skeleton, template mesh, LBS, and surface anchors.

The template carries a uv atlas that tiles the full unit square; primitive
anchors are placed at the surface points under the uv-grid cell centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import ParameterError
from .transforms import axis_angle_to_mat, mat_to_quat, quat_to_mat

SCALE_FLOOR = 1e-4  # meters, smallest allowed primitive half-extent


@dataclass
class Skeleton:
    """Topologically sorted joint tree; rest transforms are parent-relative."""

    names: list[str]
    parents: Tensor  # (J,) long, -1 for the root
    rest_rot: Tensor  # (J, 4) unit quaternion, parent-relative
    rest_trans: Tensor  # (J, 3) meters, parent-relative

    def __post_init__(self):
        p = self.parents.tolist()
        if sum(1 for x in p if x < 0) != 1:
            raise ParameterError("skeleton must have exactly one root")
        for i, par in enumerate(p):
            if par >= i:
                raise ParameterError(f"joint {i} has parent {par}; parents must precede children")

    @property
    def n_joints(self) -> int:
        return len(self.names)

    def rest_globals(self, dtype=None) -> tuple[Tensor, Tensor]:
        """Global rest-pose joint transforms (rotations, translations)."""
        return _forward_kinematics(
            self,
            torch.zeros(self.n_joints, 3, dtype=dtype or self.rest_trans.dtype),
            torch.zeros(self.n_joints, dtype=dtype or self.rest_trans.dtype),
        )


@dataclass
class BodyParams:
    """Per-joint axis-angle pose and per-bone length offsets."""

    pose: Tensor  # (J, 3) radians
    shape: Tensor  # (J,) meters

    BETA_RANGE = 0.5  # meters, sanity bound on bone-length offsets

    def validate(self, n_joints: int) -> None:
        if self.pose.shape != (n_joints, 3):
            raise ParameterError(f"pose shape {tuple(self.pose.shape)} != ({n_joints}, 3)")
        if self.shape.shape != (n_joints,):
            raise ParameterError(f"shape shape {tuple(self.shape.shape)} != ({n_joints},)")
        with torch.no_grad():
            if (self.pose.norm(dim=-1) >= 2 * torch.pi).any():
                raise ParameterError("axis-angle magnitude must be < 2*pi")
            if (self.shape.abs() > self.BETA_RANGE).any():
                raise ParameterError(f"|shape| exceeds {self.BETA_RANGE} m bound")

    @staticmethod
    def rest(n_joints: int, dtype=torch.float32) -> "BodyParams":
        return BodyParams(
            pose=torch.zeros(n_joints, 3, dtype=dtype),
            shape=torch.zeros(n_joints, dtype=dtype),
        )


@dataclass
class TemplateMesh:
    """Skinned triangle mesh with a uv atlas covering the unit square."""

    vertices: Tensor  # (V, 3) meters
    triangles: Tensor  # (F, 3) long
    skin_idx: Tensor  # (V, 4) long
    skin_w: Tensor  # (V, 4), rows sum to 1
    uv: Tensor  # (V, 2) in [0, 1]^2
    binding_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.triangles.numel() and int(self.triangles.max()) >= self.vertices.shape[0]:
            raise ParameterError("triangle index out of range")
        wsum = self.skin_w.sum(dim=-1)
        if (wsum - 1).abs().max() > 1e-6:
            raise ParameterError("skin weights must sum to 1 per vertex")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def with_vertices(self, vertices: Tensor) -> "TemplateMesh":
        """Same topology/uv/weights, new vertex positions (shares the binding cache)."""
        out = TemplateMesh.__new__(TemplateMesh)
        out.vertices = vertices
        out.triangles = self.triangles
        out.skin_idx = self.skin_idx
        out.skin_w = self.skin_w
        out.uv = self.uv
        out.binding_cache = self.binding_cache
        return out


@dataclass
class AnchorSet:
    """Rest primitives read off the mesh surface at uv-grid cell centers."""

    positions: Tensor  # (K, 3) meters
    rotations: Tensor  # (K, 4) unit quaternions, local z = surface normal
    scales: Tensor  # (K, 3) per-axis half-extents, meters
    cell_ids: Tensor  # (K,) long, row-major uv cell of each active anchor
    grid_n: int

    @property
    def count(self) -> int:
        return self.positions.shape[0]


def _forward_kinematics(
    skeleton: Skeleton, pose: Tensor, shape: Tensor
) -> tuple[Tensor, Tensor]:
    """Global joint transforms for (pose, shape); returns (J,3,3) and (J,3)."""
    dtype = pose.dtype
    rest_rot = quat_to_mat(skeleton.rest_rot.to(dtype))
    rest_trans = skeleton.rest_trans.to(dtype)
    bone_len = rest_trans.norm(dim=-1, keepdim=True)
    bone_dir = torch.where(
        bone_len > 1e-9, rest_trans / bone_len.clamp_min(1e-9), torch.zeros_like(rest_trans)
    )
    local_rot = rest_rot @ axis_angle_to_mat(pose)
    local_trans = rest_trans + shape.unsqueeze(-1) * bone_dir

    rots: list[Tensor] = []
    trans: list[Tensor] = []
    for j in range(skeleton.n_joints):
        par = int(skeleton.parents[j])
        if par < 0:
            rots.append(local_rot[j])
            trans.append(local_trans[j])
        else:
            rots.append(rots[par] @ local_rot[j])
            trans.append(rots[par] @ local_trans[j] + trans[par])
    return torch.stack(rots), torch.stack(trans)


def skin_mesh(template: TemplateMesh, skeleton: Skeleton, params: BodyParams) -> TemplateMesh:
    """Linear blend skinning of the template under (pose, shape).

    Rest pose with zero shape short-circuits to the template itself, so the
    identity case is exact.
    """
    params.validate(skeleton.n_joints)
    if int(template.skin_idx.max()) >= skeleton.n_joints:
        raise ParameterError("skin weights reference a joint outside the skeleton")
    with torch.no_grad():
        at_rest = bool((params.pose == 0).all() and (params.shape == 0).all())
    if at_rest and not (params.pose.requires_grad or params.shape.requires_grad):
        return template.with_vertices(template.vertices)

    dtype = params.pose.dtype
    g_rot, g_trans = _forward_kinematics(skeleton, params.pose, params.shape)
    b_rot, b_trans = skeleton.rest_globals(dtype=dtype)
    # skinning transform A_j = G_j(theta, beta) . G_j(0, 0)^{-1}
    a_rot = g_rot @ b_rot.transpose(-1, -2)
    a_trans = g_trans - (a_rot @ b_trans.unsqueeze(-1)).squeeze(-1)

    v = template.vertices.to(dtype)
    idx = template.skin_idx
    w = template.skin_w.to(dtype)
    per_joint = torch.einsum("vkij,vj->vki", a_rot[idx], v) + a_trans[idx]
    posed = (per_joint * w.unsqueeze(-1)).sum(dim=1)
    return template.with_vertices(posed)


def vertex_normals(vertices: Tensor, triangles: Tensor) -> Tensor:
    """Area-weighted per-vertex normals, unit length."""
    a, b, c = vertices[triangles].unbind(1)
    fn = torch.cross(b - a, c - a, dim=-1)  # area-weighted
    vn = torch.zeros_like(vertices)
    vn.index_add_(0, triangles[:, 0], fn)
    vn.index_add_(0, triangles[:, 1], fn)
    vn.index_add_(0, triangles[:, 2], fn)
    return vn / vn.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def _uv_binding(template: TemplateMesh, grid_n: int) -> dict:
    """Map each uv-grid cell center to its containing triangle + barycentrics.

    Cached on the template (shared by posed copies): topology and uv never
    change across poses, only vertex positions do.
    """
    key = ("uvbind", grid_n)
    if key in template.binding_cache:
        return template.binding_cache[key]

    uv = template.uv.double()
    tris = template.triangles
    n = grid_n
    ii = torch.arange(n, dtype=torch.float64)
    cu, cv = torch.meshgrid((ii + 0.5) / n, (ii + 0.5) / n, indexing="xy")
    centers = torch.stack([cu.reshape(-1), cv.reshape(-1)], dim=-1)  # row-major cells

    # bin triangles by the uv cells their bbox overlaps, then test candidates
    tuv = uv[tris]  # (F, 3, 2)
    lo = (tuv.min(dim=1).values * n).floor().clamp(0, n - 1).long()
    hi = (tuv.max(dim=1).values * n).floor().clamp(0, n - 1).long()
    spans = (hi - lo + 1).prod(dim=1)
    tri_rep = torch.repeat_interleave(torch.arange(len(tris)), spans)
    offs = torch.arange(int(spans.sum()))
    offs = offs - torch.repeat_interleave(torch.cumsum(spans, 0) - spans, spans)
    w_span = (hi[:, 0] - lo[:, 0] + 1)[tri_rep]
    cell_x = lo[tri_rep, 0] + offs % w_span
    cell_y = lo[tri_rep, 1] + offs // w_span
    cand_cell = cell_y * n + cell_x

    p = centers[cand_cell]
    a, b, c = tuv[tri_rep].unbind(1)
    e1, e2, ep = b - a, c - a, p - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    ok = det.abs() > 1e-14
    s = torch.where(ok, (ep[:, 0] * e2[:, 1] - ep[:, 1] * e2[:, 0]) / det, torch.full_like(det, -1))
    t = torch.where(ok, (e1[:, 0] * ep[:, 1] - e1[:, 1] * ep[:, 0]) / det, torch.full_like(det, -1))
    inside = (s >= -1e-9) & (t >= -1e-9) & (s + t <= 1 + 1e-9)

    # deterministic pick: lowest triangle index among containers of each cell
    order = torch.argsort(cand_cell * len(tris) + tri_rep)
    cand_cell, tri_rep = cand_cell[order], tri_rep[order]
    s, t, inside = s[order], t[order], inside[order]
    cell_tri = torch.full((n * n,), -1, dtype=torch.long)
    cell_bary = torch.zeros(n * n, 3, dtype=torch.float64)
    sel = inside.nonzero().squeeze(-1)
    # reversed scatter keeps the first (lowest-index) hit per cell
    for i in sel.flip(0).tolist():
        cid = int(cand_cell[i])
        cell_tri[cid] = tri_rep[i]
        cell_bary[cid] = torch.stack([1 - s[i] - t[i], s[i], t[i]])

    active = (cell_tri >= 0).nonzero().squeeze(-1)
    binding = {
        "cells": active,
        "tri": cell_tri[active],
        "bary": cell_bary[active],
    }
    template.binding_cache[key] = binding
    return binding


def compute_anchors(template: TemplateMesh, grid_n: int) -> AnchorSet:
    """Place one rest primitive per occupied uv-grid cell on the mesh surface.

    Local frame: z = interpolated surface normal, x = uv u-direction projected
    to the tangent plane. Half-extents follow the surface extent of the cell.
    """
    if grid_n < 1:
        raise ParameterError("grid_n must be >= 1")
    binding = _uv_binding(template, grid_n)
    if binding["cells"].numel() == 0:
        raise ParameterError("no uv cell hit any triangle; uv chart is degenerate")

    dtype = template.vertices.dtype
    tris = template.triangles[binding["tri"]]  # (K, 3)
    bary = binding["bary"].to(dtype)  # (K, 3)
    corners = template.vertices[tris]  # (K, 3, 3)
    positions = (corners * bary.unsqueeze(-1)).sum(dim=1)

    vn = vertex_normals(template.vertices, template.triangles)
    normals = (vn[tris] * bary.unsqueeze(-1)).sum(dim=1)
    normals = normals / normals.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    # surface derivatives from the uv parameterization of the binding triangle
    uvs = template.uv[tris].to(dtype)  # (K, 3, 2)
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    du1 = uvs[:, 1] - uvs[:, 0]
    du2 = uvs[:, 2] - uvs[:, 0]
    det = (du1[:, 0] * du2[:, 1] - du1[:, 1] * du2[:, 0]).unsqueeze(-1)
    det = torch.where(det.abs() < 1e-12, torch.full_like(det, 1e-12), det)
    dpdu = (e1 * du2[:, 1:2] - e2 * du1[:, 1:2]) / det
    dpdv = (e2 * du1[:, 0:1] - e1 * du2[:, 0:1]) / det

    x_axis = dpdu - (dpdu * normals).sum(-1, keepdim=True) * normals
    bad = x_axis.norm(dim=-1) < 1e-9
    if bad.any():
        fallback = torch.zeros_like(x_axis[bad])
        fallback[:, 0] = 1.0
        x_axis[bad] = fallback - (fallback * normals[bad]).sum(-1, keepdim=True) * normals[bad]
    x_axis = x_axis / x_axis.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    y_axis = torch.cross(normals, x_axis, dim=-1)
    rot_mat = torch.stack([x_axis, y_axis, normals], dim=-1)  # columns are axes
    rotations = mat_to_quat(rot_mat)

    half_u = dpdu.norm(dim=-1) / (2 * grid_n)
    half_v = dpdv.norm(dim=-1) / (2 * grid_n)
    half_n = 0.5 * (half_u + half_v)
    scales = torch.stack([half_u, half_v, half_n], dim=-1).clamp_min(SCALE_FLOOR)

    return AnchorSet(
        positions=positions,
        rotations=rotations,
        scales=scales,
        cell_ids=binding["cells"].clone(),
        grid_n=grid_n,
    )
