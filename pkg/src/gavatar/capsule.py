"""Procedural capsule-person template: 24 joints, ~8k vertices, full uv atlas.

Stands along +y in an A-pose, pelvis at the origin. Each bone segment is
meshed as a capsule whose chart occupies one horizontal band of the unit
square, so the atlas tiles [0,1]^2 with no gaps and every uv-grid cell is
backed by a triangle.
"""

from __future__ import annotations

import math

import torch

from .body import Skeleton, TemplateMesh

JOINTS = [
    # name, parent, offset from parent (meters)
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("l_hip", 0, (0.09, -0.05, 0.0)),
    ("r_hip", 0, (-0.09, -0.05, 0.0)),
    ("spine1", 0, (0.0, 0.12, 0.0)),
    ("l_knee", 1, (0.0, -0.40, 0.0)),
    ("r_knee", 2, (0.0, -0.40, 0.0)),
    ("spine2", 3, (0.0, 0.13, 0.0)),
    ("l_ankle", 4, (0.0, -0.42, 0.0)),
    ("r_ankle", 5, (0.0, -0.42, 0.0)),
    ("spine3", 6, (0.0, 0.13, 0.0)),
    ("l_foot", 7, (0.0, -0.06, 0.12)),
    ("r_foot", 8, (0.0, -0.06, 0.12)),
    ("neck", 9, (0.0, 0.10, 0.0)),
    ("l_collar", 9, (0.07, 0.06, 0.0)),
    ("r_collar", 9, (-0.07, 0.06, 0.0)),
    ("head", 12, (0.0, 0.09, 0.0)),
    ("l_shoulder", 13, (0.10, 0.02, 0.0)),
    ("r_shoulder", 14, (-0.10, 0.02, 0.0)),
    ("l_elbow", 16, (0.19, -0.19, 0.0)),
    ("r_elbow", 17, (-0.19, -0.19, 0.0)),
    ("l_wrist", 18, (0.18, -0.18, 0.0)),
    ("r_wrist", 19, (-0.18, -0.18, 0.0)),
    ("l_hand", 20, (0.06, -0.06, 0.0)),
    ("r_hand", 21, (-0.06, -0.06, 0.0)),
]

# capsule radius per bone segment, keyed by the segment's child joint
SEGMENT_RADIUS = {
    "l_hip": 0.06, "r_hip": 0.06, "spine1": 0.11,
    "l_knee": 0.07, "r_knee": 0.07, "spine2": 0.12,
    "l_ankle": 0.05, "r_ankle": 0.05, "spine3": 0.12,
    "l_foot": 0.04, "r_foot": 0.04, "neck": 0.05,
    "l_collar": 0.05, "r_collar": 0.05, "head": 0.10,
    "l_shoulder": 0.05, "r_shoulder": 0.05,
    "l_elbow": 0.045, "r_elbow": 0.045,
    "l_wrist": 0.04, "r_wrist": 0.04,
    "l_hand": 0.035, "r_hand": 0.035,
}

_POLE_GAP = 0.12  # rad; hemisphere rings stop short of the pole to keep normals finite


def make_skeleton(dtype=torch.float32) -> Skeleton:
    names = [j[0] for j in JOINTS]
    parents = torch.tensor([j[1] for j in JOINTS], dtype=torch.long)
    trans = torch.tensor([j[2] for j in JOINTS], dtype=dtype)
    rot = torch.zeros(len(JOINTS), 4, dtype=dtype)
    rot[:, 0] = 1.0
    return Skeleton(names=names, parents=parents, rest_rot=rot, rest_trans=trans)


def _joint_positions(skeleton: Skeleton) -> torch.Tensor:
    _, trans = skeleton.rest_globals()
    return trans


def _frame(axis: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    helper = torch.tensor([0.0, 0.0, 1.0], dtype=axis.dtype)
    if float(torch.abs(axis @ helper)) > 0.9:
        helper = torch.tensor([1.0, 0.0, 0.0], dtype=axis.dtype)
    e1 = torch.cross(helper, axis, dim=0)
    e1 = e1 / e1.norm()
    e2 = torch.cross(axis, e1, dim=0)
    return e1, e2


def _profile(radius: float, length: float, n_rows: int) -> list[tuple[float, float]]:
    """(axial offset from segment start, ring radius) rows, arc-length spaced."""
    cap = radius * (math.pi / 2 - _POLE_GAP)
    total = 2 * cap + length
    rows = []
    for i in range(n_rows):
        s = total * i / (n_rows - 1)
        if s <= cap:
            phi = _POLE_GAP + s / radius
            rows.append((-radius * math.cos(phi), radius * math.sin(phi)))
        elif s >= cap + length:
            phi = min((s - cap - length) / radius, math.pi / 2 - _POLE_GAP)
            rows.append((length + radius * math.sin(phi), radius * math.cos(phi)))
        else:
            rows.append((s - cap, radius))
    return rows


def make_template(n_u: int = 13, n_v: int = 24, dtype=torch.float32) -> TemplateMesh:
    """Build the capsule-person mesh with skin weights and a gap-free uv atlas."""
    skeleton = make_skeleton(dtype=torch.float64)
    joints = _joint_positions(skeleton)
    segments = [(int(skeleton.parents[j]), j) for j in range(1, skeleton.n_joints)]
    n_bands = len(segments)

    verts, uvs, faces = [], [], []
    skin_idx, skin_w = [], []
    base = 0
    for band, (par, child) in enumerate(segments):
        name = skeleton.names[child]
        radius = SEGMENT_RADIUS[name]
        a = joints[par]
        b = joints[child]
        seg = b - a
        length = float(seg.norm())
        axis = seg / max(length, 1e-9) if length > 1e-9 else torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
        e1, e2 = _frame(axis)
        rows = _profile(radius, length, n_v + 1)
        cap = radius * (math.pi / 2 - _POLE_GAP)
        total = 2 * cap + length

        grandpar = int(skeleton.parents[par]) if par > 0 else -1
        for iv, (axial, ring_r) in enumerate(rows):
            s = total * iv / n_v
            for iu in range(n_u + 1):
                theta = 2 * math.pi * iu / n_u
                radial = math.cos(theta) * e1 + math.sin(theta) * e2
                p = a + axial * axis + ring_r * radial
                verts.append(p)
                uvs.append((iu / n_u, (band + iv / n_v) / n_bands))
                # cylinder body rigid to the segment's parent joint; caps blend
                if s < cap and grandpar >= 0:
                    t = 1 - s / cap  # 1 at the bottom pole
                    skin_idx.append((par, grandpar, 0, 0))
                    skin_w.append((1 - 0.5 * t, 0.5 * t, 0.0, 0.0))
                elif s > cap + length:
                    t = (s - cap - length) / cap
                    skin_idx.append((par, child, 0, 0))
                    skin_w.append((1 - 0.5 * t, 0.5 * t, 0.0, 0.0))
                else:
                    skin_idx.append((par, 0, 0, 0))
                    skin_w.append((1.0, 0.0, 0.0, 0.0))
        for iv in range(n_v):
            for iu in range(n_u):
                v00 = base + iv * (n_u + 1) + iu
                v01 = v00 + 1
                v10 = v00 + (n_u + 1)
                v11 = v10 + 1
                faces.append((v00, v01, v11))
                faces.append((v00, v11, v10))
        base += (n_v + 1) * (n_u + 1)

    return TemplateMesh(
        vertices=torch.stack(verts).to(dtype),
        triangles=torch.tensor(faces, dtype=torch.long),
        skin_idx=torch.tensor(skin_idx, dtype=torch.long),
        skin_w=torch.tensor(skin_w, dtype=dtype),
        uv=torch.tensor(uvs, dtype=dtype),
    )


def capsule_sdf(points: torch.Tensor, skeleton: Skeleton | None = None) -> torch.Tensor:
    """Analytic signed distance to the capsule-person surface (negative inside).

    Exact for the union away from capsule intersections; used as the SDF
    pretraining target.
    """
    if skeleton is None:
        skeleton = make_skeleton(dtype=torch.float64)
    joints = _joint_positions(skeleton).to(points.dtype)
    d = None
    for j in range(1, skeleton.n_joints):
        par = int(skeleton.parents[j])
        a, b = joints[par], joints[j]
        r = SEGMENT_RADIUS[skeleton.names[j]]
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-12:
            dist = (points - a).norm(dim=-1) - r
        else:
            t = ((points - a) @ ab / denom).clamp(0, 1)
            closest = a + t.unsqueeze(-1) * ab
            dist = (points - closest).norm(dim=-1) - r
        d = dist if d is None else torch.minimum(d, dist)
    return d


def sphere_sdf(points: torch.Tensor, radius: float = 0.9) -> torch.Tensor:
    """Analytic sphere shell SDF for synthetic tests (negative inside)."""
    return points.norm(dim=-1) - radius
