"""Pinhole camera: world-to-camera extrinsics plus pixel intrinsics.

Camera looks along +z in its own frame; v grows with world-up, so image row 0
is the bottom scanline (PNG export flips vertically).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ParameterError


@dataclass
class Camera:
    rot: Tensor  # (3, 3) world-to-camera
    trans: Tensor  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError("focal lengths must be positive")
        eye = torch.eye(3, dtype=self.rot.dtype)
        if (self.rot @ self.rot.T - eye).abs().max() > 1e-5:
            raise ParameterError("camera rotation must be orthonormal")

    @property
    def center(self) -> Tensor:
        """Camera position in world coordinates."""
        return -(self.rot.T @ self.trans)

    def to(self, dtype) -> "Camera":
        c = Camera.__new__(Camera)
        c.rot = self.rot.to(dtype)
        c.trans = self.trans.to(dtype)
        c.fx, c.fy, c.cx, c.cy = self.fx, self.fy, self.cx, self.cy
        c.width, c.height = self.width, self.height
        return c

    def world_to_cam(self, p: Tensor) -> Tensor:
        return p @ self.rot.T + self.trans

    def project_points(self, p: Tensor) -> tuple[Tensor, Tensor]:
        """(N,3) world -> ((N,2) pixel coords, (N,) camera depth)."""
        pc = self.world_to_cam(p)
        z = pc[..., 2]
        u = self.fx * pc[..., 0] / z + self.cx
        v = self.fy * pc[..., 1] / z + self.cy
        return torch.stack([u, v], dim=-1), z


def look_at(
    eye,
    target,
    width: int,
    height: int,
    fov_y_deg: float = 45.0,
    up=(0.0, 1.0, 0.0),
    dtype=torch.float32,
) -> Camera:
    eye = torch.as_tensor(eye, dtype=dtype)
    target = torch.as_tensor(target, dtype=dtype)
    up = torch.as_tensor(up, dtype=dtype)
    fwd = target - eye
    fwd = fwd / fwd.norm()
    right = torch.cross(up, fwd, dim=0)
    if right.norm() < 1e-8:
        up = torch.tensor([0.0, 0.0, 1.0], dtype=dtype)
        right = torch.cross(up, fwd, dim=0)
    right = right / right.norm()
    upv = torch.cross(fwd, right, dim=0)
    rot = torch.stack([right, upv, fwd])
    trans = -(rot @ eye)
    fy = (height / 2) / math.tan(math.radians(fov_y_deg) / 2)
    return Camera(
        rot=rot, trans=trans, fx=fy, fy=fy, cx=width / 2, cy=height / 2,
        width=width, height=height,
    )
