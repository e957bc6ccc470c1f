"""Z-buffered mesh rasterization emitting a normal map and a coverage mask.

Interior coverage is binary; pixels within a small band of the mask boundary
get fractional coverage from their distance to the nearest silhouette edge,
which is what makes the mask differentiable w.r.t. vertex positions.
"""

from __future__ import annotations

import torch
from torch import Tensor

from .camera import Camera
from .tetmesh import TriMesh

BACKGROUND_NORMAL = 0.5  # encoded zero normal
_BAND_PX = 2  # Chebyshev radius of the antialiased boundary band
_PAIR_CHUNK = 2_000_000


def rasterize_mesh(mesh: TriMesh, cam: Camera, near: float = 0.01,
                   need_normals: bool = True) -> tuple[Tensor, Tensor]:
    """-> (I_N (H, W, 3) view-space normals in [0,1], I_M (H, W) coverage).

    `need_normals=False` skips normal interpolation and returns the flat
    background normal image (the mask is unaffected)."""
    H, W = cam.height, cam.width
    if mesh.is_empty:
        dtype = mesh.vertices.dtype
        return (
            torch.full((H, W, 3), BACKGROUND_NORMAL, dtype=dtype),
            torch.zeros(H, W, dtype=dtype),
        )
    dtype = mesh.vertices.dtype
    uv, z = cam.to(dtype).project_points(mesh.vertices)
    ok_face = (z[mesh.faces] > near).all(dim=-1)
    faces = mesh.faces[ok_face]
    if faces.shape[0] == 0:
        return (
            torch.full((H, W, 3), BACKGROUND_NORMAL, dtype=dtype),
            torch.zeros(H, W, dtype=dtype),
        )

    tri_uv = uv[faces]  # (F, 3, 2)
    inv_z = 1.0 / z

    # selection phase runs detached; per-pixel values are recomputed
    # differentiably afterwards for the winning faces
    uv_d = uv.detach()
    tri_d = tri_uv.detach()
    invz_d = inv_z.detach()

    lo = tri_d.min(dim=1).values.floor()
    hi = tri_d.max(dim=1).values.ceil()
    x0 = lo[:, 0].clamp(0, W).long()
    x1 = hi[:, 0].clamp(0, W).long()
    y0 = lo[:, 1].clamp(0, H).long()
    y1 = hi[:, 1].clamp(0, H).long()
    spans = ((x1 - x0) * (y1 - y0)).clamp_min(0)

    n_pix = H * W
    big = torch.finfo(dtype).max
    zbuf = torch.full((n_pix,), big, dtype=dtype)
    face_buf = torch.full((n_pix,), -1, dtype=torch.long)

    fid_all = torch.repeat_interleave(torch.arange(faces.shape[0]), spans)
    total = int(spans.sum())
    offs_all = torch.arange(total) - torch.repeat_interleave(spans.cumsum(0) - spans, spans)

    for s in range(0, total, _PAIR_CHUNK):
        fid = fid_all[s : s + _PAIR_CHUNK]
        offs = offs_all[s : s + _PAIR_CHUNK]
        wsp = (x1 - x0)[fid]
        px = x0[fid] + offs % wsp
        py = y0[fid] + offs // wsp
        p = torch.stack([px.to(dtype) + 0.5, py.to(dtype) + 0.5], dim=-1)
        bary, area = _barycentric(tri_d[fid], p)
        inside = (bary >= 0).all(dim=-1) & (area.abs() > 1e-12)
        if not bool(inside.any()):
            continue
        fid, bary = fid[inside], bary[inside]
        pix = (py[inside] * W + px[inside]).long()
        depth = 1.0 / (bary * invz_d[faces[fid]]).sum(-1)
        # nearest-depth wins; ties by face order via stable sort
        order = torch.argsort(depth, stable=True)
        fid, pix, depth = fid[order], pix[order], depth[order]
        first = _first_per_key(pix, n_pix)
        closer = depth[first] < zbuf[pix[first]]
        upd = first[closer]
        zbuf[pix[upd]] = depth[upd]
        face_buf[pix[upd]] = fid[upd]

    covered = face_buf >= 0
    hard = covered.to(dtype)

    # camera-space normals, perspective-correct interpolation (differentiable
    # in vertex positions and normals for the fixed coverage)
    normal_img = torch.full((n_pix, 3), BACKGROUND_NORMAL, dtype=dtype)
    hit = covered.nonzero().squeeze(-1) if need_normals else torch.zeros(0, dtype=torch.long)
    if hit.numel():
        f = faces[face_buf[hit]]
        pc = torch.stack(
            [(hit % W).to(dtype) + 0.5, (hit // W).to(dtype) + 0.5], dim=-1
        )
        bary, _ = _barycentric(tri_uv[face_buf[hit]], pc)
        bp = bary * inv_z[f]
        bp = bp / bp.sum(-1, keepdim=True)
        n_cam = mesh.normals.to(dtype) @ cam.rot.to(dtype).T
        n_pixv = (n_cam[f] * bp.unsqueeze(-1)).sum(1)
        n_pixv = n_pixv / n_pixv.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        normal_img = normal_img.index_put((hit,), (n_pixv + 1) / 2)

    mask = _antialias_mask(hard.reshape(H, W), mesh, faces, uv)
    return normal_img.reshape(H, W, 3), mask


def _barycentric(tri: Tensor, p: Tensor) -> tuple[Tensor, Tensor]:
    """Screen-space barycentrics of points against triangles, plus the
    signed triangle area."""
    a, b, c = tri.unbind(1)
    area = _edge(a, b, c)
    w0 = _edge(b, c, p)
    w1 = _edge(c, a, p)
    w2 = _edge(a, b, p)
    denom = torch.where(area.abs() < 1e-12, torch.full_like(area, 1e-12), area)
    bary = torch.stack([w0, w1, w2], dim=-1) / denom.unsqueeze(-1)
    return bary, area


def _edge(a: Tensor, b: Tensor, p: Tensor) -> Tensor:
    return (b[..., 0] - a[..., 0]) * (p[..., 1] - a[..., 1]) - (
        b[..., 1] - a[..., 1]
    ) * (p[..., 0] - a[..., 0])


def _first_per_key(keys: Tensor, n_keys: int) -> Tensor:
    """Indices of the first occurrence of each key (input grouped or not)."""
    order = torch.argsort(keys, stable=True)
    sk = keys[order]
    firstmask = torch.ones_like(sk, dtype=torch.bool)
    firstmask[1:] = sk[1:] != sk[:-1]
    return order[firstmask]


def silhouette_edges(faces: Tensor, uv: Tensor) -> Tensor:
    """(S, 2) vertex-index pairs of screen-space silhouette edges: border
    edges plus edges where the two incident faces change screen orientation."""
    e = torch.cat([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], dim=0)
    eface = torch.arange(faces.shape[0]).repeat(3)
    ekey = e.sort(dim=-1).values
    key = ekey[:, 0] * (int(uv.shape[0]) + 1) + ekey[:, 1]
    order = torch.argsort(key, stable=True)
    key, e_sorted, eface = key[order], ekey[order], eface[order]
    newgrp = torch.ones_like(key, dtype=torch.bool)
    newgrp[1:] = key[1:] != key[:-1]
    grp = newgrp.cumsum(0) - 1
    n_grp = int(grp[-1]) + 1

    tri = uv[faces]
    area = _edge(tri[:, 0], tri[:, 1], tri[:, 2])
    sgn = torch.sign(area)[eface]

    cnt = torch.zeros(n_grp, dtype=torch.long).index_add_(
        0, grp, torch.ones_like(grp)
    )
    ssum = torch.zeros(n_grp, dtype=sgn.dtype).index_add_(0, grp, sgn)
    first_rows = newgrp.nonzero().squeeze(-1)
    reps = e_sorted[first_rows]
    border = cnt == 1
    flip = (cnt == 2) & (ssum.abs() < 1.5)  # opposite or degenerate orientation
    return reps[border | flip]


def _antialias_mask(hard: Tensor, mesh: TriMesh, faces: Tensor, uv: Tensor) -> Tensor:
    H, W = hard.shape
    sil = silhouette_edges(faces, uv)
    if sil.numel() == 0:
        return hard

    # band: pixels within _BAND_PX Chebyshev distance of a coverage change
    m = hard > 0.5
    grown = m.clone()
    shrunk = m.clone()
    for _ in range(_BAND_PX):
        grown = _dilate(grown)
        shrunk = ~_dilate(~shrunk)
    band = (grown & ~shrunk).nonzero()
    if band.shape[0] == 0:
        return hard

    py, px = band[:, 0], band[:, 1]
    p = torch.stack([px.to(hard.dtype) + 0.5, py.to(hard.dtype) + 0.5], dim=-1)
    a = uv[sil[:, 0]]
    b = uv[sil[:, 1]]
    dist = _point_segment_distance(p, a, b)
    sign = torch.where(m[py, px], torch.ones_like(dist), -torch.ones_like(dist))
    coverage = (0.5 + sign * dist).clamp(0.0, 1.0)

    out = hard.reshape(-1).scatter(0, (py * W + px), coverage)
    return out.reshape(H, W)


def _dilate(m: Tensor) -> Tensor:
    out = m.clone()
    out[1:] |= m[:-1]
    out[:-1] |= m[1:]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def _point_segment_distance(p: Tensor, a: Tensor, b: Tensor, chunk: int = 512) -> Tensor:
    """Min distance from each point to any segment; differentiable through
    the winning segment's endpoints."""
    best = None
    for s in range(0, a.shape[0], chunk):
        aa = a[s : s + chunk].unsqueeze(0)  # (1, S, 2)
        bb = b[s : s + chunk].unsqueeze(0)
        pp = p.unsqueeze(1)  # (P, 1, 2)
        ab = bb - aa
        denom = (ab * ab).sum(-1).clamp_min(1e-12)
        t = ((pp - aa) * ab).sum(-1) / denom
        t = t.clamp(0.0, 1.0)
        closest = aa + t.unsqueeze(-1) * ab
        d = (pp - closest).norm(dim=-1)  # (P, S)
        dmin = d.min(dim=1).values
        best = dmin if best is None else torch.minimum(best, dmin)
    return best
