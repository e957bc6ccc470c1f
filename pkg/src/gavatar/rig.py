"""Pose-driven primitives: surface anchors plus learned correctives.

Primitives track the skinned surface through the anchors (recomputed on the
posed mesh every call); the corrective nets add small pose-dependent offsets
to position, orientation, and scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .body import SCALE_FLOOR, AnchorSet, BodyParams, Skeleton, TemplateMesh, compute_anchors, skin_mesh
from .errors import ParameterError
from .transforms import axis_angle_to_mat, quat_mul, quat_normalize, rotation_6d  # noqa: F401


@dataclass
class Primitives:
    """Batch of posed oriented boxes."""

    positions: Tensor  # (K, 3) meters
    rotations: Tensor  # (K, 4) unit quaternions
    scales: Tensor  # (K, 3) per-axis half-extent, meters

    @property
    def count(self) -> int:
        return self.positions.shape[0]


class CorrectiveNets(nn.Module):
    """Shared trunk + three heads mapping a 6D-per-joint pose encoding to
    per-primitive position/rotation/scale corrections.

    The final layers are zero-initialized so the correctives start as the
    identity.
    """

    def __init__(self, n_joints: int, n_primitives: int, hidden: int = 128):
        super().__init__()
        self.n_joints = n_joints
        self.n_primitives = n_primitives
        self.trunk = nn.Sequential(
            nn.Linear(6 * n_joints, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
        )
        self.head_pos = nn.Linear(hidden, 3 * n_primitives)
        self.head_rot = nn.Linear(hidden, 4 * n_primitives)
        self.head_scale = nn.Linear(hidden, 3 * n_primitives)
        for head in (self.head_pos, self.head_rot, self.head_scale):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, pose: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """pose: (J, 3) axis-angle -> (dP (K,3), dR (K,4) unit, dS (K,3))."""
        enc = rotation_6d(axis_angle_to_mat(pose)).reshape(-1)
        h = self.trunk(enc)
        d_pos = self.head_pos(h).reshape(self.n_primitives, 3)
        d_scale = self.head_scale(h).reshape(self.n_primitives, 3)
        raw_rot = self.head_rot(h).reshape(self.n_primitives, 4)
        identity = torch.zeros_like(raw_rot)
        identity[:, 0] = 1.0
        d_rot = quat_normalize(identity + raw_rot)
        return d_pos, d_rot, d_scale


def generate_primitives(
    anchors: AnchorSet,
    correctives: CorrectiveNets | None,
    pose: BodyParams,
) -> Primitives:
    """Compose rest anchors with pose-dependent correctives.

    P = anchor + dP, R = dR * anchor_R, S = clamp(anchor_S + dS, floor).
    """
    if correctives is None:
        return Primitives(anchors.positions, anchors.rotations, anchors.scales)
    if correctives.n_primitives != anchors.count:
        raise ParameterError(
            f"correctives sized for {correctives.n_primitives} primitives, anchors have {anchors.count}"
        )
    d_pos, d_rot, d_scale = correctives(pose.pose)
    if not (
        torch.isfinite(d_pos).all() and torch.isfinite(d_rot).all() and torch.isfinite(d_scale).all()
    ):
        raise ParameterError("corrective network produced non-finite output (diverged)")
    positions = anchors.positions + d_pos
    # unit * unit stays unit to ~1e-7; composing with the exact identity at
    # zero correctives is then bitwise the anchor rotation
    rotations = quat_mul(d_rot, anchors.rotations)
    scales = (anchors.scales + d_scale).clamp_min(SCALE_FLOOR)
    return Primitives(positions, rotations, scales)


def posed_primitives(
    template: TemplateMesh,
    skeleton: Skeleton,
    anchors_grid_n: int,
    correctives: CorrectiveNets | None,
    pose: BodyParams,
) -> Primitives:
    """Full rig evaluation: skin the mesh, re-anchor on it, apply correctives."""
    posed = skin_mesh(template, skeleton, pose)
    anchors = compute_anchors(posed, anchors_grid_n)
    return generate_primitives(anchors, correctives, pose)
