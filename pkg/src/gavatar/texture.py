"""Texture extraction: the Gaussian color field doubles as a 3D texture field.

Per-vertex colors are the degree-0 SH color at each vertex's canonical
position. The optional atlas gives every triangle its own square cell; texel
centers map through barycentrics to surface points and query the field
directly, so atlas colors are exact field samples.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

from .fields import AttributeField, eval_attributes
from .sh import C0
from .tetmesh import TriMesh


def sh_dc_color(sh: Tensor) -> Tensor:
    """(N, 48) channel-major SH -> (N, 3) view-independent RGB in [0, 1]."""
    dc = sh.reshape(-1, 3, 16)[:, :, 0]
    return (0.5 + C0 * dc).clamp(0.0, 1.0)


def bake_texture(
    mesh: TriMesh,
    field: AttributeField,
    atlas_size: int = 0,
    batch: int = 65536,
) -> TriMesh:
    """Attach vertex colors (and optionally a per-triangle atlas) to the mesh."""
    with torch.no_grad():
        colors = []
        for s in range(0, mesh.vertices.shape[0], batch):
            sh, _, _ = eval_attributes(field, mesh.vertices[s : s + batch])
            colors.append(sh_dc_color(sh))
        mesh.vertex_colors = torch.cat(colors) if colors else torch.zeros(0, 3)
        if atlas_size > 0:
            mesh.uv, mesh.texture = _bake_atlas(mesh, field, atlas_size, batch)
    return mesh


def _bake_atlas(
    mesh: TriMesh, field: AttributeField, size: int, batch: int
) -> tuple[Tensor, Tensor]:
    n_faces = mesh.faces.shape[0]
    grid = math.ceil(math.sqrt(n_faces))
    cell = 1.0 / grid
    inset = cell * 0.05

    fidx = torch.arange(n_faces)
    cx = (fidx % grid).to(mesh.vertices.dtype)
    cy = (fidx // grid).to(mesh.vertices.dtype)
    corners = torch.tensor(
        [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=mesh.vertices.dtype
    )
    uv = torch.stack([cx, cy], dim=-1).unsqueeze(1) * cell
    uv = uv + inset + corners.unsqueeze(0) * (cell - 2 * inset)

    # rasterize the atlas: texel -> cell -> barycentric -> 3D -> field query
    tex = torch.full((size, size, 3), 0.5, dtype=mesh.vertices.dtype)
    ty, tx = torch.meshgrid(
        torch.arange(size), torch.arange(size), indexing="ij"
    )
    tu = (tx.reshape(-1).to(uv.dtype) + 0.5) / size
    tv = (ty.reshape(-1).to(uv.dtype) + 0.5) / size
    gx = (tu / cell).floor().clamp(0, grid - 1).long()
    gy = (tv / cell).floor().clamp(0, grid - 1).long()
    face = gy * grid + gx
    ok = face < n_faces
    # local coords in the inset cell; inside the corner triangle u + v <= 1
    lu = (tu - gx.to(uv.dtype) * cell - inset) / (cell - 2 * inset)
    lv = (tv - gy.to(uv.dtype) * cell - inset) / (cell - 2 * inset)
    lu_c = lu.clamp(0.0, 1.0)
    lv_c = lv.clamp(0.0, 1.0)
    over = (lu_c + lv_c - 1.0).clamp_min(0.0) / 2
    bu = lu_c - over
    bv = lv_c - over
    bary = torch.stack([1 - bu - bv, bu, bv], dim=-1)

    tri = mesh.vertices[mesh.faces[face.clamp_max(n_faces - 1)]]
    pos = (tri * bary.unsqueeze(-1)).sum(1)
    flat = tex.reshape(-1, 3)
    idx = ok.nonzero().squeeze(-1)
    for s in range(0, idx.numel(), batch):
        sel = idx[s : s + batch]
        sh, _, _ = eval_attributes(field, pos[sel])
        flat[sel] = sh_dc_color(sh)
    return uv, tex
