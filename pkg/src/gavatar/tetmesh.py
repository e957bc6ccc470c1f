"""Marching tetrahedra over a body-fitting lattice.

Extracted vertices sit at the linear zero crossing of the SDF along tet
edges and stay differentiable w.r.t. the SDF values; triangle winding is
outward under the negative-inside convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import torch
from torch import Tensor

from .fields import CANONICAL_BOX

# the 6-tet decomposition of a cube, all sharing the main diagonal c0-c7;
# corner bit order is (x, y, z)
_CUBE_TETS = (
    (0, 1, 3, 7),
    (0, 3, 2, 7),
    (0, 2, 6, 7),
    (0, 6, 4, 7),
    (0, 4, 5, 7),
    (0, 5, 1, 7),
)

_TET_EDGES = tuple(combinations(range(4), 2))  # local edge ids 0..5
_EDGE_ID = {e: i for i, e in enumerate(_TET_EDGES)}


def _build_case_table() -> list[list[tuple[int, int, int]]]:
    """Triangles (as local-edge triples) per 4-bit inside mask, wound so the
    normal points from the inside (negative) toward the outside."""
    verts = torch.tensor(
        [[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    )  # positively oriented canonical tet
    table: list[list[tuple[int, int, int]]] = [[] for _ in range(16)]
    for mask in range(1, 15):
        inside = [i for i in range(4) if mask >> i & 1]
        outside = [i for i in range(4) if not mask >> i & 1]
        tris: list[tuple[int, int, int]] = []
        if len(inside) == 1:
            i = inside[0]
            tris.append(tuple(_EDGE_ID[tuple(sorted((i, o)))] for o in outside))
        elif len(inside) == 3:
            o = outside[0]
            tris.append(tuple(_EDGE_ID[tuple(sorted((i, o)))] for i in inside))
        else:
            i, j = inside
            k, l = outside
            quad = [
                _EDGE_ID[tuple(sorted((i, k)))],
                _EDGE_ID[tuple(sorted((i, l)))],
                _EDGE_ID[tuple(sorted((j, l)))],
                _EDGE_ID[tuple(sorted((j, k)))],
            ]
            tris.append((quad[0], quad[1], quad[2]))
            tris.append((quad[0], quad[2], quad[3]))
        # orient by the midpoint geometry of the canonical tet
        mids = torch.stack([(verts[a] + verts[b]) / 2 for a, b in _TET_EDGES])
        outward = verts[outside].mean(0) - verts[inside].mean(0)
        fixed = []
        for t in tris:
            a, b, c = mids[t[0]], mids[t[1]], mids[t[2]]
            n = torch.cross(b - a, c - a, dim=0)
            fixed.append(t if float(n @ outward) > 0 else (t[0], t[2], t[1]))
        table[mask] = fixed
    return table


_CASE_TABLE = _build_case_table()
# flattened per-case tensors for vectorized lookup
_CASE_NTRI = torch.tensor([len(t) for t in _CASE_TABLE])
_CASE_TRIS = torch.full((16, 2, 3), -1, dtype=torch.long)
for _m, _tris in enumerate(_CASE_TABLE):
    for _ti, _t in enumerate(_tris):
        _CASE_TRIS[_m, _ti] = torch.tensor(_t)


@dataclass
class TetGrid:
    """Regular lattice of tetrahedra covering an axis-aligned box."""

    vertices: Tensor  # (V, 3) meters
    tets: Tensor  # (T, 4) long, positively oriented
    resolution: int
    box: tuple[float, float]

    @staticmethod
    def build(resolution: int = 64, box: tuple[float, float] = CANONICAL_BOX,
              dtype=torch.float32) -> "TetGrid":
        lo, hi = box
        n = resolution
        axis = torch.linspace(lo, hi, n + 1, dtype=dtype)
        grid = torch.stack(torch.meshgrid(axis, axis, axis, indexing="ij"), dim=-1)
        verts = grid.reshape(-1, 3)

        def vid(ix, iy, iz):
            return (ix * (n + 1) + iy) * (n + 1) + iz

        ix, iy, iz = torch.meshgrid(
            torch.arange(n), torch.arange(n), torch.arange(n), indexing="ij"
        )
        ix, iy, iz = ix.reshape(-1), iy.reshape(-1), iz.reshape(-1)
        corners = torch.stack(
            [vid(ix + (b >> 0 & 1), iy + (b >> 1 & 1), iz + (b >> 2 & 1)) for b in range(8)],
            dim=-1,
        )  # (C, 8)
        tets = torch.cat([corners[:, list(t)] for t in _CUBE_TETS], dim=0)

        # enforce positive orientation
        p = verts[tets]
        vol = torch.einsum(
            "ti,ti->t",
            torch.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], dim=-1),
            p[:, 3] - p[:, 0],
        )
        flip = vol < 0
        tets[flip] = tets[flip][:, [0, 2, 1, 3]]
        return TetGrid(vertices=verts, tets=tets, resolution=n, box=box)


@dataclass
class TriMesh:
    """Extracted triangle surface; vertex normals are unit length."""

    vertices: Tensor  # (V, 3)
    faces: Tensor  # (F, 3) long
    normals: Tensor  # (V, 3)
    vertex_colors: Tensor | None = None  # (V, 3) in [0, 1]
    uv: Tensor | None = None  # (F, 3, 2) per-corner atlas coords
    texture: Tensor | None = None  # (S, S, 3) in [0, 1]

    @property
    def is_empty(self) -> bool:
        return self.faces.shape[0] == 0


def compute_vertex_normals(vertices: Tensor, faces: Tensor) -> Tensor:
    a, b, c = vertices[faces].unbind(1)
    fn = torch.cross(b - a, c - a, dim=-1)
    vn = torch.zeros_like(vertices)
    for k in range(3):
        vn = vn.index_add(0, faces[:, k], fn)
    return vn / vn.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def _empty_mesh(dtype) -> TriMesh:
    z = torch.zeros(0, 3, dtype=dtype)
    return TriMesh(vertices=z, faces=torch.zeros(0, 3, dtype=torch.long), normals=z.clone())


def marching_tets(sdf_values: Tensor, grid: TetGrid) -> TriMesh:
    """Zero isosurface of per-grid-vertex SDF samples (negative inside).

    Crossing vertices follow v = (s_b v_a - s_a v_b) / (s_b - s_a), so the
    output positions are differentiable in the SDF samples.
    """
    inside = sdf_values < 0
    occ = inside[grid.tets]  # (T, 4) bool
    mask = (
        occ[:, 0].long()
        + occ[:, 1].long() * 2
        + occ[:, 2].long() * 4
        + occ[:, 3].long() * 8
    )
    crossing = (mask > 0) & (mask < 15)
    if not bool(crossing.any()):
        return _empty_mesh(grid.vertices.dtype)
    tets = grid.tets[crossing]
    mask = mask[crossing]

    # global key per (tet, local edge); a crossing that lands exactly on a
    # zero-valued grid vertex keys on that vertex instead of the edge, so
    # every incident tet shares one mesh vertex and the surface stays welded
    edges_local = torch.tensor(_TET_EDGES)  # (6, 2)
    ev = tets[:, edges_local]  # (T, 6, 2) global vertex ids
    ev_sorted = ev.sort(dim=-1).values
    nv = grid.vertices.shape[0]
    ekey = ev_sorted[..., 0] * nv + ev_sorted[..., 1]  # (T, 6)
    s0 = sdf_values[ev_sorted[..., 0]]
    s1 = sdf_values[ev_sorted[..., 1]]
    vert_key_base = nv * nv
    ekey = torch.where(s0 == 0, vert_key_base + ev_sorted[..., 0], ekey)
    ekey = torch.where(s1 == 0, vert_key_base + ev_sorted[..., 1], ekey)

    ntri = _CASE_NTRI[mask]  # (T,)
    tris_local = _CASE_TRIS[mask]  # (T, 2, 3)
    keep = torch.arange(2).unsqueeze(0) < ntri.unsqueeze(1)  # (T, 2)
    face_edges = tris_local[keep]  # (F, 3) local edge ids
    tet_of_face = torch.arange(tets.shape[0]).unsqueeze(1).expand(-1, 2)[keep]
    face_keys = ekey[tet_of_face.unsqueeze(-1), face_edges]  # (F, 3) global keys

    uniq, inv = torch.unique(face_keys.reshape(-1), return_inverse=True)
    faces = inv.reshape(-1, 3)

    on_vertex = uniq >= vert_key_base
    va = torch.where(on_vertex, uniq - vert_key_base, uniq // nv)
    vb = torch.where(on_vertex, uniq - vert_key_base, uniq % nv)
    sa = sdf_values[va]
    sb = sdf_values[vb]
    denom = sb - sa
    denom = torch.where(denom.abs() < 1e-12, torch.full_like(denom, 1e-12), denom)
    verts = (
        sb.unsqueeze(-1) * grid.vertices[va] - sa.unsqueeze(-1) * grid.vertices[vb]
    ) / denom.unsqueeze(-1)
    verts = torch.where(on_vertex.unsqueeze(-1), grid.vertices[va], verts)

    # faces collapsed by vertex welding are topological slivers; drop them
    distinct = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    faces = faces[distinct]
    if faces.shape[0] == 0:
        return _empty_mesh(grid.vertices.dtype)

    return TriMesh(
        vertices=verts,
        faces=faces,
        normals=compute_vertex_normals(verts, faces),
    )


def unique_edges(faces: Tensor) -> tuple[Tensor, Tensor]:
    """(E, 2) unique undirected edges and per-edge incident-face counts."""
    e = torch.cat([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], dim=0)
    e = e.sort(dim=-1).values
    uniq, counts = torch.unique(e, dim=0, return_counts=True)
    return uniq, counts


def is_watertight(mesh: TriMesh) -> bool:
    if mesh.is_empty:
        return False
    _, counts = unique_edges(mesh.faces)
    return bool((counts == 2).all())


def euler_characteristic(mesh: TriMesh) -> int:
    edges, _ = unique_edges(mesh.faces)
    return mesh.vertices.shape[0] - edges.shape[0] + mesh.faces.shape[0]
