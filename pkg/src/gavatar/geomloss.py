"""Geometry regularizers: eikonal, mask-matching alpha, normal consistency."""

from __future__ import annotations

import torch
from torch import Tensor

from .errors import ParameterError
from .fields import SdfField
from .tetmesh import TriMesh, unique_edges

EIKONAL_NOISE_STD = 0.02  # meters, matches the kernel's high-opacity band


def eikonal_points(
    centers: Tensor,
    n_samples: int,
    generator: torch.Generator | None = None,
    noise_std: float = EIKONAL_NOISE_STD,
) -> Tensor:
    """Gaussian world centers plus normally perturbed copies."""
    pick = torch.randint(0, centers.shape[0], (n_samples,), generator=generator)
    base = centers[pick]
    noise = torch.randn(n_samples, 3, dtype=centers.dtype, generator=generator)
    return torch.cat([base, base + noise_std * noise])


def eikonal_loss(sdf, points: Tensor) -> Tensor:
    """Mean (|grad sdf| - 1)^2 over the sample points.

    `sdf` is any callable p -> signed distance (an SdfField or an analytic
    field); the gradient is taken by autograd so the loss backpropagates into
    field parameters.
    """
    pts = points.detach().requires_grad_(True)
    d = sdf(pts)
    (grad,) = torch.autograd.grad(d.sum(), pts, create_graph=True)
    return ((grad.norm(dim=-1) - 1) ** 2).mean()


def alpha_loss(mask: Tensor, alpha_img: Tensor) -> Tensor:
    """Mean squared difference between the mesh mask and the splat alpha."""
    if mask.shape != alpha_img.shape:
        raise ParameterError(
            f"mask {tuple(mask.shape)} and alpha {tuple(alpha_img.shape)} differ"
        )
    return ((mask - alpha_img) ** 2).mean()


def normal_consistency_loss(mesh: TriMesh) -> Tensor:
    """Mean over mesh edges of (1 - n_a . n_b) for the endpoint normals."""
    if mesh.is_empty:
        return torch.zeros((), dtype=mesh.vertices.dtype)
    edges, _ = unique_edges(mesh.faces)
    na = mesh.normals[edges[:, 0]]
    nb = mesh.normals[edges[:, 1]]
    return (1 - (na * nb).sum(-1)).mean()
