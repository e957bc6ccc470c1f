"""Mesh export: OBJ (with optional uv atlas + material) and binary PLY with
vertex colors. Readers exist for round-trip verification."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import ParameterError
from ..tetmesh import TriMesh
from .png import save_png


def save_obj(mesh: TriMesh, path: str | Path) -> None:
    path = Path(path)
    lines = []
    has_uv = mesh.uv is not None and mesh.texture is not None
    if has_uv:
        mtl_path = path.with_suffix(".mtl")
        tex_path = path.with_suffix(".png")
        save_png(mesh.texture, tex_path, flip_vertical=False)
        mtl_path.write_text(
            "newmtl baked\nKa 1 1 1\nKd 1 1 1\nmap_Kd "
            f"{tex_path.name}\n"
        )
        lines.append(f"mtllib {mtl_path.name}")
    for v in mesh.vertices.tolist():
        lines.append(f"v {v[0]:.7g} {v[1]:.7g} {v[2]:.7g}")
    for n in mesh.normals.tolist():
        lines.append(f"vn {n[0]:.7g} {n[1]:.7g} {n[2]:.7g}")
    if has_uv:
        for corner in mesh.uv.reshape(-1, 2).tolist():
            lines.append(f"vt {corner[0]:.7g} {corner[1]:.7g}")
        lines.append("usemtl baked")
        for i, f in enumerate(mesh.faces.tolist()):
            t = 3 * i
            lines.append(
                f"f {f[0]+1}/{t+1}/{f[0]+1} {f[1]+1}/{t+2}/{f[1]+1} {f[2]+1}/{t+3}/{f[2]+1}"
            )
    else:
        for f in mesh.faces.tolist():
            lines.append(f"f {f[0]+1}//{f[0]+1} {f[1]+1}//{f[1]+1} {f[2]+1}//{f[2]+1}")
    path.write_text("\n".join(lines) + "\n")


def load_obj(path: str | Path) -> tuple[torch.Tensor, torch.Tensor]:
    """-> (vertices, faces); ignores normals/uv, enough for round-trip checks."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return torch.tensor(verts), torch.tensor(faces, dtype=torch.long)


def save_ply(mesh: TriMesh, path: str | Path) -> None:
    """Binary little-endian PLY with uchar vertex colors."""
    v = mesh.vertices.detach().numpy().astype("<f4")
    n = mesh.normals.detach().numpy().astype("<f4")
    if mesh.vertex_colors is not None:
        c = (mesh.vertex_colors.detach().numpy().clip(0, 1) * 255).round().astype(np.uint8)
    else:
        c = np.full((len(v), 3), 200, dtype=np.uint8)
    f = mesh.faces.detach().numpy().astype("<i4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(v)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {len(f)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    body = bytearray()
    for i in range(len(v)):
        body += struct.pack("<6f3B", *v[i], *n[i], *c[i])
    for i in range(len(f)):
        body += struct.pack("<B3i", 3, *f[i])
    Path(path).write_bytes(header.encode("ascii") + bytes(body))


def load_ply(path: str | Path):
    """-> (vertices, faces, colors) from the writer's layout."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii")
    if "format binary_little_endian" not in header:
        raise ParameterError("expected binary little-endian PLY")
    n_vert = int(header.split("element vertex ")[1].split()[0])
    n_face = int(header.split("element face ")[1].split()[0])
    off = end
    verts = np.zeros((n_vert, 3), np.float32)
    colors = np.zeros((n_vert, 3), np.uint8)
    stride = struct.calcsize("<6f3B")
    for i in range(n_vert):
        vals = struct.unpack_from("<6f3B", data, off)
        verts[i] = vals[:3]
        colors[i] = vals[6:9]
        off += stride
    faces = np.zeros((n_face, 3), np.int64)
    for i in range(n_face):
        cnt = data[off]
        if cnt != 3:
            raise ParameterError("non-triangular PLY face")
        faces[i] = struct.unpack_from("<3i", data, off + 1)
        off += 1 + 12
    return torch.from_numpy(verts), torch.from_numpy(faces), torch.from_numpy(colors)
