"""Real spherical harmonics up to degree 3 for view-dependent Gaussian color.

Color convention: channel = 0.5 + sum of coefficient * basis(view_dir); the
48 coefficients are channel-major (16 per R, G, B).
"""

from __future__ import annotations

import torch
from torch import Tensor

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def sh_basis(dirs: Tensor) -> Tensor:
    """(N,3) unit directions -> (N,16) degree-3 SH basis values."""
    x, y, z = dirs.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    one = torch.ones_like(x)
    return torch.stack(
        [
            C0 * one,
            -C1 * y,
            C1 * z,
            -C1 * x,
            C2[0] * xy,
            C2[1] * yz,
            C2[2] * (2 * zz - xx - yy),
            C2[3] * xz,
            C2[4] * (xx - yy),
            C3[0] * y * (3 * xx - yy),
            C3[1] * xy * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ],
        dim=-1,
    )


def eval_sh(coeffs: Tensor, view_dir: Tensor) -> Tensor:
    """(N,48) channel-major coefficients, (N,3) unit dirs -> (N,3) RGB.

    Output is unclamped here; the compositing stage clamps to [0,1].
    """
    basis = sh_basis(view_dir)  # (N, 16)
    c = coeffs.reshape(coeffs.shape[0], 3, 16)
    return 0.5 + torch.einsum("nci,ni->nc", c, basis)
