"""Template asset file: JSON header (skeleton, counts) + packed binary blob."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..body import Skeleton, TemplateMesh
from ..errors import CheckpointError

MAGIC = b"GAVT"
VERSION = 1


def template_to_bytes(template: TemplateMesh, skeleton: Skeleton) -> bytes:
    header = {
        "joints": [
            {
                "name": skeleton.names[j],
                "parent": int(skeleton.parents[j]),
                "rot": [float(x) for x in skeleton.rest_rot[j]],
                "trans": [float(x) for x in skeleton.rest_trans[j]],
            }
            for j in range(skeleton.n_joints)
        ],
        "counts": {
            "vertices": template.n_vertices,
            "triangles": int(template.triangles.shape[0]),
        },
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(
        np.ascontiguousarray(a).tobytes()
        for a in (
            template.vertices.numpy().astype("<f4"),
            template.triangles.numpy().astype("<u4"),
            template.skin_idx.numpy().astype("<u4"),
            template.skin_w.numpy().astype("<f4"),
            template.uv.numpy().astype("<f4"),
        )
    )
    return MAGIC + struct.pack("<II", VERSION, len(hjson)) + hjson + blob


def template_from_bytes(data: bytes) -> tuple[TemplateMesh, Skeleton]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("bad template magic")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported template version {version}")
    header = json.loads(data[12 : 12 + hlen])
    v = header["counts"]["vertices"]
    f = header["counts"]["triangles"]
    off = 12 + hlen
    expect = v * 3 * 4 + f * 3 * 4 + v * 4 * 4 + v * 4 * 4 + v * 2 * 4
    if len(data) != off + expect:
        raise CheckpointError("template blob size mismatch")

    def take(count, dt):
        nonlocal off
        n = count * np.dtype(dt).itemsize
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).copy()
        off += n
        return arr

    verts = take(v * 3, "<f4").reshape(v, 3)
    tris = take(f * 3, "<u4").reshape(f, 3).astype(np.int64)
    sidx = take(v * 4, "<u4").reshape(v, 4).astype(np.int64)
    sw = take(v * 4, "<f4").reshape(v, 4)
    uv = take(v * 2, "<f4").reshape(v, 2)

    joints = header["joints"]
    skeleton = Skeleton(
        names=[j["name"] for j in joints],
        parents=torch.tensor([j["parent"] for j in joints], dtype=torch.long),
        rest_rot=torch.tensor([j["rot"] for j in joints], dtype=torch.float32),
        rest_trans=torch.tensor([j["trans"] for j in joints], dtype=torch.float32),
    )
    template = TemplateMesh(
        vertices=torch.from_numpy(verts),
        triangles=torch.from_numpy(tris),
        skin_idx=torch.from_numpy(sidx),
        skin_w=torch.from_numpy(sw),
        uv=torch.from_numpy(uv),
    )
    return template, skeleton


def save_template(template: TemplateMesh, skeleton: Skeleton, path: str | Path) -> None:
    Path(path).write_bytes(template_to_bytes(template, skeleton))


def load_template(path: str | Path) -> tuple[TemplateMesh, Skeleton]:
    return template_from_bytes(Path(path).read_bytes())
