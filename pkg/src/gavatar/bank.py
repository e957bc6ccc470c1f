"""Per-primitive local Gaussians: storage, world transform, densification.

Local attributes other than position normally come from the neural fields;
the bank's attribute arrays hold defaults until `bake` freezes field output
into them. Positions (and the split-scale multiplier) always live here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import ParameterError
from .rig import Primitives
from .transforms import quat_mul, quat_normalize, quat_to_mat

GAUSSIAN_CAP = 2_000_000
DENSIFY_GRAD_THRESHOLD = 2e-4  # screen-space (NDC) position-gradient norm
PRUNE_OPACITY_THRESHOLD = 0.01
DENSIFY_SIZE_THRESHOLD = 0.01  # meters; clone below, split above
SPLIT_SCALE_DIV = 1.6


@dataclass
class GaussianBank:
    """Flat per-Gaussian arrays, grouped contiguously by primitive."""

    positions: Tensor  # (N, 3) primitive-local
    scale_mult: Tensor  # (N,) multiplier on field-predicted local scale (split bookkeeping)
    offsets: Tensor  # (K,) long, start of each primitive's run
    counts: Tensor  # (K,) long
    # baked attribute store; defaults until `bake` fills them from the fields
    sh: Tensor  # (N, 48)
    rotations: Tensor  # (N, 4)
    scales: Tensor  # (N, 3)
    opacities: Tensor  # (N,)
    baked: bool = False

    def __post_init__(self):
        if int(self.counts.sum()) != self.positions.shape[0]:
            raise ParameterError("sum of per-primitive counts must equal N")
        if self.offsets.numel() > 1 and not (self.offsets[1:] >= self.offsets[:-1]).all():
            # pruning may empty a primitive, so runs are non-decreasing
            raise ParameterError("offsets must be non-decreasing")

    @property
    def n_gaussians(self) -> int:
        return self.positions.shape[0]

    @property
    def n_primitives(self) -> int:
        return self.offsets.shape[0]

    def primitive_index(self) -> Tensor:
        """(N,) primitive id of each Gaussian (cached; banks are immutable
        in shape, densification builds a fresh bank)."""
        cached = getattr(self, "_prim_index", None)
        if cached is None:
            cached = torch.repeat_interleave(
                torch.arange(self.n_primitives, device=self.counts.device), self.counts
            )
            object.__setattr__(self, "_prim_index", cached)
        return cached


def _lattice(side: int, dtype) -> Tensor:
    if side == 1:
        return torch.zeros(1, 3, dtype=dtype)
    axis = torch.linspace(-0.5, 0.5, side, dtype=dtype)
    g = torch.stack(torch.meshgrid(axis, axis, axis, indexing="ij"), dim=-1)
    return g.reshape(-1, 3)


def init_bank(n_primitives: int, per_primitive: int, dtype=torch.float32) -> GaussianBank:
    """Seed each primitive with a cube lattice of Gaussians in [-0.5, 0.5]^3.

    Perfect-cube counts get the exact c^3 lattice; other counts take the
    first `per_primitive` points (by distance to the origin, stable order)
    of the next cube up, so any positive count is usable.
    """
    if per_primitive < 1:
        raise ParameterError("per_primitive must be >= 1")
    if n_primitives < 1:
        raise ParameterError("n_primitives must be >= 1")
    side = round(per_primitive ** (1 / 3))
    if side**3 == per_primitive:
        pts = _lattice(side, dtype)
    else:
        while side**3 < per_primitive:
            side += 1
        pts = _lattice(side, dtype)
        order = torch.argsort(pts.norm(dim=-1), stable=True)
        pts = pts[order[:per_primitive]]

    n = n_primitives * per_primitive
    positions = pts.repeat(n_primitives, 1).contiguous()
    counts = torch.full((n_primitives,), per_primitive, dtype=torch.long)
    offsets = torch.cumsum(counts, 0) - per_primitive
    rot = torch.zeros(n, 4, dtype=dtype)
    rot[:, 0] = 1.0
    return GaussianBank(
        positions=positions,
        scale_mult=torch.ones(n, dtype=dtype),
        offsets=offsets,
        counts=counts,
        sh=torch.zeros(n, 48, dtype=dtype),
        rotations=rot,
        scales=torch.full((n, 3), 0.05, dtype=dtype),
        opacities=torch.full((n,), 0.5, dtype=dtype),
    )


def to_world(
    positions: Tensor,
    rotations: Tensor,
    scales: Tensor,
    prims: Primitives,
    prim_index: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Primitive-local Gaussians -> world: p' = R(S⊙p)+P, s' = S⊙s, r' = R⊗r.

    With a single primitive and no index, all Gaussians use it; otherwise
    `prim_index` maps each Gaussian to its primitive.
    """
    if prim_index is None:
        if prims.count != 1 and prims.count != positions.shape[0]:
            raise ParameterError("prim_index required when primitives and Gaussians disagree")
        pr, pp, ps = prims.rotations, prims.positions, prims.scales
        if prims.count == 1:
            pr, pp, ps = pr.expand(positions.shape[0], 4), pp.expand_as(positions), ps.expand_as(positions)
    else:
        pr = prims.rotations[prim_index]
        pp = prims.positions[prim_index]
        ps = prims.scales[prim_index]
    rot_mat = quat_to_mat(pr)
    world_pos = torch.einsum("nij,nj->ni", rot_mat, ps * positions) + pp
    world_scale = ps * scales
    world_rot = quat_normalize(quat_mul(pr, rotations))
    return world_pos, world_rot, world_scale


def local_position_loss(positions: Tensor) -> Tensor:
    """Sum of squared local-position norms; keeps Gaussians near the origin."""
    return (positions**2).sum()


def densify_prune(
    bank: GaussianBank,
    grad_stats: Tensor,
    opacities: Tensor,
    world_scales: Tensor,
    *,
    generator: torch.Generator | None = None,
    grad_threshold: float = DENSIFY_GRAD_THRESHOLD,
    opacity_threshold: float = PRUNE_OPACITY_THRESHOLD,
    size_threshold: float = DENSIFY_SIZE_THRESHOLD,
    cap: int = GAUSSIAN_CAP,
) -> tuple[GaussianBank, Tensor, Tensor]:
    """Clone/split high-gradient Gaussians, prune transparent ones.

    Returns (new bank, parent-index map, is_new mask): the map gives the old
    index every surviving or spawned Gaussian came from, and is_new marks
    clones and split children whose optimizer state should start fresh.
    The whole operation is a no-op once the bank exceeds the cap.
    """
    n = bank.n_gaussians
    if grad_stats.shape[0] != n or opacities.shape[0] != n or world_scales.shape[0] != n:
        raise ParameterError("stats must cover every Gaussian")
    if n > cap:  # densification disabled past the cap
        return bank, torch.arange(n), torch.zeros(n, dtype=torch.bool)

    prim = bank.primitive_index()
    keep = opacities >= opacity_threshold
    hot = (grad_stats > grad_threshold) & keep
    big = world_scales.max(dim=-1).values > size_threshold
    clone = hot & ~big
    split = hot & big

    # survivors: everything kept except split parents (replaced by children)
    survive = keep & ~split
    src = [survive.nonzero().squeeze(-1)]
    new_pos = [bank.positions[survive]]
    new_mult = [bank.scale_mult[survive]]
    new_prim = [prim[survive]]
    fresh = [torch.zeros(int(survive.sum()), dtype=torch.bool)]

    c_idx = clone.nonzero().squeeze(-1)
    if c_idx.numel():
        src.append(c_idx)
        new_pos.append(bank.positions[c_idx])
        new_mult.append(bank.scale_mult[c_idx])
        new_prim.append(prim[c_idx])
        fresh.append(torch.ones(c_idx.numel(), dtype=torch.bool))

    s_idx = split.nonzero().squeeze(-1)
    if s_idx.numel():
        # two children sampled inside the parent's local footprint
        local_scale = bank.scales[s_idx] * bank.scale_mult[s_idx].unsqueeze(-1)
        for _ in range(2):
            noise = torch.randn(s_idx.numel(), 3, dtype=bank.positions.dtype, generator=generator)
            src.append(s_idx)
            new_pos.append(bank.positions[s_idx] + noise * local_scale)
            new_mult.append(bank.scale_mult[s_idx] / SPLIT_SCALE_DIV)
            new_prim.append(prim[s_idx])
            fresh.append(torch.ones(s_idx.numel(), dtype=torch.bool))

    src_t = torch.cat(src)
    pos_t = torch.cat(new_pos)
    mult_t = torch.cat(new_mult)
    prim_t = torch.cat(new_prim)
    fresh_t = torch.cat(fresh)

    # re-sort into contiguous per-primitive runs (stable keeps relative order)
    order = torch.argsort(prim_t, stable=True)
    src_t, pos_t, mult_t, prim_t, fresh_t = (
        src_t[order], pos_t[order], mult_t[order], prim_t[order], fresh_t[order]
    )
    counts = torch.bincount(prim_t, minlength=bank.n_primitives)
    offsets = torch.cumsum(counts, 0) - counts

    new_bank = GaussianBank(
        positions=pos_t.detach().clone(),
        scale_mult=mult_t,
        offsets=offsets,
        counts=counts,
        sh=bank.sh[src_t],
        rotations=bank.rotations[src_t],
        scales=bank.scales[src_t],
        opacities=bank.opacities[src_t],
        baked=bank.baked,
    )
    return new_bank, src_t, fresh_t
