"""Rotation and rigid-transform helpers shared across the pipeline.

Quaternions use (w, x, y, z) ordering throughout.
"""

from __future__ import annotations

import torch
from torch import Tensor


def quat_normalize(q: Tensor, eps: float = 1e-12) -> Tensor:
    return q / q.norm(dim=-1, keepdim=True).clamp_min(eps)


def quat_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product a ⊗ b, batched over leading dims."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_mat(q: Tensor) -> Tensor:
    """Unit quaternion -> rotation matrix, shape (..., 3, 3)."""
    w, x, y, z = q.unbind(-1)
    m = torch.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def mat_to_quat(m: Tensor) -> Tensor:
    """Rotation matrix -> unit quaternion.

    Uses the largest-component branch per element so the selected sqrt
    argument is always >= 1, keeping the conversion differentiable."""
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    m00, m01, m02 = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    m10, m11, m12 = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    m20, m21, m22 = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    args = torch.stack([1 + tr, 1 + 2 * m00 - tr, 1 + 2 * m11 - tr, 1 + 2 * m22 - tr], dim=-1)
    s = 2 * torch.sqrt(args.clamp_min(1e-9))
    s0, s1, s2, s3 = s.unbind(-1)
    cand = torch.stack(
        [
            torch.stack([0.25 * s0, (m21 - m12) / s0, (m02 - m20) / s0, (m10 - m01) / s0], -1),
            torch.stack([(m21 - m12) / s1, 0.25 * s1, (m01 + m10) / s1, (m02 + m20) / s1], -1),
            torch.stack([(m02 - m20) / s2, (m01 + m10) / s2, 0.25 * s2, (m12 + m21) / s2], -1),
            torch.stack([(m10 - m01) / s3, (m02 + m20) / s3, (m12 + m21) / s3, 0.25 * s3], -1),
        ],
        dim=1,
    )  # (N, 4 branches, 4)
    pick = args.argmax(dim=-1)
    q = cand[torch.arange(m.shape[0]), pick]
    q = quat_normalize(q)
    return q.reshape(batch + (4,))


def axis_angle_to_mat(aa: Tensor) -> Tensor:
    """Rodrigues formula in the norm-free form I + A K + B K^2 with
    K = skew(aa); the Taylor branch keeps gradients finite at zero angle
    and the zero-angle value is exactly the identity."""
    t2 = (aa * aa).sum(-1, keepdim=True)
    small = t2 < 1e-12
    theta = torch.sqrt(t2.clamp_min(1e-24))
    a_coef = torch.where(small, 1 - t2 / 6, torch.sin(theta) / theta)
    b_coef = torch.where(small, 0.5 - t2 / 24, (1 - torch.cos(theta)) / t2.clamp_min(1e-24))
    x, y, z = aa.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], dim=-1
    ).reshape(aa.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(k.shape)
    return eye + a_coef.unsqueeze(-1) * k + b_coef.unsqueeze(-1) * (k @ k)


def axis_angle_to_quat(aa: Tensor) -> Tensor:
    """(w, x, y, z) from axis-angle; gradient-safe at zero angle."""
    t2 = (aa * aa).sum(-1, keepdim=True)
    small = t2 < 1e-12
    theta = torch.sqrt(t2.clamp_min(1e-24))
    c_coef = torch.where(small, 0.5 - t2 / 48, torch.sin(theta / 2) / theta)
    return torch.cat([torch.cos(theta / 2), aa * c_coef], dim=-1)


def rotation_6d(m: Tensor) -> Tensor:
    """First two columns of a rotation matrix, flattened: (..., 3, 3) -> (..., 6)."""
    return m[..., :, :2].reshape(m.shape[:-2] + (6,))


def rigid_inverse(rot: Tensor, trans: Tensor) -> tuple[Tensor, Tensor]:
    """Inverse of x -> R x + t."""
    rot_t = rot.transpose(-1, -2)
    return rot_t, -(rot_t @ trans.unsqueeze(-1)).squeeze(-1)


def compose_rigid(
    rot_a: Tensor, trans_a: Tensor, rot_b: Tensor, trans_b: Tensor
) -> tuple[Tensor, Tensor]:
    """(A ∘ B)(x) = A(B(x)) for x -> R x + t maps."""
    return rot_a @ rot_b, (rot_a @ trans_b.unsqueeze(-1)).squeeze(-1) + trans_a
