"""Hash-grid neural fields for Gaussian attributes and signed distance.

Both fields are queried at canonical (rest-pose) world positions, which makes
the predicted attributes pose-independent. Opacity is not predicted directly:
it is the bell-shaped kernel applied to the signed distance, so Gaussians are
opaque only near the surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ConvergenceError, FieldEvalError

CANONICAL_BOX = (-1.1, 1.1)  # meters, canonical body bounding cube
TARGET_WORLD_SCALE = 0.004  # meters, pretraining target Gaussian scale

# spatial-hash primes as wrapped int32 (hashing uses int32 overflow on purpose)
_HASH_PRIMES = (1, 2654435761 - 2**32, 805459861)


class HashGrid(nn.Module):
    """Multi-resolution hashed feature lattice with trilinear interpolation."""

    def __init__(
        self,
        n_levels: int,
        n_features: int = 2,
        base_res: int = 16,
        growth: float = 1.5,
        log2_table: int = 19,
        box: tuple[float, float] = CANONICAL_BOX,
    ):
        super().__init__()
        self.n_levels = n_levels
        self.n_features = n_features
        self.table_size = 2**log2_table
        self.box = box
        res = [int(math.floor(base_res * growth**i)) for i in range(n_levels)]
        for i in range(1, n_levels):  # guarantee strictly increasing resolutions
            res[i] = max(res[i], res[i - 1] + 1)
        self.resolutions = res
        self.tables = nn.Parameter(
            torch.empty(n_levels, self.table_size, n_features).uniform_(-1e-4, 1e-4)
        )
        self.register_buffer("_res", torch.tensor(res, dtype=torch.float32), persistent=False)
        self.register_buffer(
            "_corner",
            torch.tensor([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)]),
            persistent=False,
        )
        self.register_buffer(
            "_level_offset",
            torch.arange(n_levels).reshape(-1, 1, 1) * self.table_size,
            persistent=False,
        )

    @property
    def out_dim(self) -> int:
        return self.n_levels * self.n_features

    def forward(self, p: Tensor) -> Tensor:
        """(N, 3) -> (N, L*F): all levels interpolated in one batched pass.

        Corner hashes factor per axis (hash of i0+1 is the axis hash plus the
        prime, combined by xor), which keeps the integer work at O(L*N)
        int32 ops instead of O(L*N*8*3) int64 ones.
        """
        lo, hi = self.box
        x = ((p - lo) / (hi - lo)).clamp(0.0, 1.0)
        res = self._res.to(x.dtype).reshape(-1, 1, 1)  # (L, 1, 1)
        scaled = x.unsqueeze(0) * (res - 1)  # (L, N, 3)
        i0 = scaled.floor().clamp_(max=(res - 2).expand_as(scaled))
        frac = scaled - i0
        i0 = i0.to(torch.int32)
        hx0 = i0[..., 0] * _HASH_PRIMES[0]  # int32 wrap-around is fine: it is a hash
        hy0 = i0[..., 1] * _HASH_PRIMES[1]
        hz0 = i0[..., 2] * _HASH_PRIMES[2]
        hx = torch.stack([hx0, hx0 + _HASH_PRIMES[0]], dim=-1)  # (L, N, 2)
        hy = torch.stack([hy0, hy0 + _HASH_PRIMES[1]], dim=-1)
        hz = torch.stack([hz0, hz0 + _HASH_PRIMES[2]], dim=-1)
        h = (
            hx.reshape(*hx.shape[:2], 2, 1, 1)
            ^ hy.reshape(*hy.shape[:2], 1, 2, 1)
            ^ hz.reshape(*hz.shape[:2], 1, 1, 2)
        ).reshape(*hx.shape[:2], 8)
        h = (h.long() % self.table_size) + self._level_offset  # (L, N, 8)
        feats = self.tables.reshape(-1, self.n_features)[h]  # (L, N, 8, F)
        wx = torch.stack([1 - frac[..., 0], frac[..., 0]], dim=-1)
        wy = torch.stack([1 - frac[..., 1], frac[..., 1]], dim=-1)
        wz = torch.stack([1 - frac[..., 2], frac[..., 2]], dim=-1)
        w = (
            wx.reshape(*wx.shape[:2], 2, 1, 1)
            * wy.reshape(*wy.shape[:2], 1, 2, 1)
            * wz.reshape(*wz.shape[:2], 1, 1, 2)
        ).reshape(*wx.shape[:2], 8)
        out = (feats * w.unsqueeze(-1)).sum(dim=2)  # (L, N, F)
        return out.permute(1, 0, 2).reshape(p.shape[0], -1)


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden),
        nn.ReLU(),
        nn.Linear(hidden, hidden),
        nn.ReLU(),
        nn.Linear(hidden, out_dim),
    )


class AttributeField(nn.Module):
    """Canonical position -> 55 values: 3 log-scale, 4 rotation, 48 SH color."""

    OUT_DIM = 55

    def __init__(self, n_levels: int = 8, hidden: int = 64, log2_table: int = 19,
                 box: tuple[float, float] = CANONICAL_BOX):
        super().__init__()
        self.grid = HashGrid(n_levels, log2_table=log2_table, box=box)
        self.mlp = _mlp(self.grid.out_dim, hidden, self.OUT_DIM)
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)
        with torch.no_grad():
            # start Gaussians small (exp(-4) local scale) so an untrained
            # scene renders tightly instead of with primitive-sized blobs
            self.mlp[-1].bias[:3] = -4.0
        self.query_count = 0

    def forward(self, p: Tensor) -> Tensor:
        self.query_count += 1
        return self.mlp(self.grid(p))


class SdfField(nn.Module):
    """Canonical position -> signed distance (meters, negative inside)."""

    def __init__(self, n_levels: int = 16, hidden: int = 64, log2_table: int = 19,
                 box: tuple[float, float] = CANONICAL_BOX):
        super().__init__()
        self.grid = HashGrid(n_levels, log2_table=log2_table, box=box)
        self.mlp = _mlp(self.grid.out_dim, hidden, 1)
        self.query_count = 0

    def forward(self, p: Tensor) -> Tensor:
        self.query_count += 1
        return self.mlp(self.grid(p)).squeeze(-1)


class OpacityKernel(nn.Module):
    """Bell-shaped map from signed distance to opacity, peak gamma/4 at zero.

    gamma (overall opacity scale) and lam (tightness, 1/m) are learnable and
    kept positive through an exponential parameterization.
    """

    def __init__(self, gamma: float = 2.0, lam: float = 300.0):
        super().__init__()
        self.raw = nn.Parameter(torch.tensor([math.log(gamma), math.log(lam)]))

    @property
    def gamma(self) -> Tensor:
        return self.raw[0].exp()

    @property
    def lam(self) -> Tensor:
        return self.raw[1].exp()

    def forward(self, sdf_value: Tensor) -> Tensor:
        # gamma e^{-u}/(1+e^{-u})^2 with u = |lam x|: identical by evenness,
        # and immune to exp overflow on either sign
        u = (self.lam.to(sdf_value.dtype) * sdf_value).abs()
        e = torch.exp(-u)
        return self.gamma.to(sdf_value.dtype) * e / (1 + e) ** 2


def opacity(kernel: OpacityKernel, sdf_value: Tensor) -> Tensor:
    return kernel(sdf_value)


def decode_attributes(raw: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Split the 55-dim field output into (sh (…,48), rot (…,4), scale (…,3))."""
    raw_scale, raw_rot, sh = raw[..., :3], raw[..., 3:7], raw[..., 7:]
    identity = torch.zeros_like(raw_rot)
    identity[..., 0] = 1.0
    rot = raw_rot + identity
    rot = rot / rot.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return sh, rot, raw_scale.exp()


def eval_attributes(field: AttributeField, p: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Query color/rotation/scale at canonical positions; hard error on NaN."""
    raw = field(p)
    if not torch.isfinite(raw).all():
        raise FieldEvalError("attribute field produced non-finite output")
    return decode_attributes(raw)


def eval_sdf(field: SdfField, p: Tensor) -> Tensor:
    d = field(p)
    if not torch.isfinite(d).all():
        raise FieldEvalError("SDF field produced non-finite output")
    return d


@dataclass
class PretrainReport:
    steps: int
    scale_rel_err: float
    sdf_abs_err: float


def pretrain_fields(
    attr_field: AttributeField,
    sdf_field: SdfField,
    canonical_positions: Tensor,
    primitive_scales: Tensor,
    sdf_target,
    *,
    target_world_scale: float = TARGET_WORLD_SCALE,
    max_steps: int = 4000,
    batch: int = 4096,
    lr: float = 1e-3,
    scale_tol: float = 0.05,
    sdf_tol: float = 0.005,
    noise_std: float = 0.02,
    seed: int = 0,
) -> PretrainReport:
    """Regress the fields to their initial targets.

    Attribute field: decoded world scale -> `target_world_scale`, rotation ->
    identity, SH -> zero. SDF field: the analytic `sdf_target(p)` on a mix of
    box-uniform and near-surface samples. Stops when held-out scale error and
    SDF error are inside tolerance; raises ConvergenceError past the budget.
    """
    gen = torch.Generator().manual_seed(seed)
    dtype = canonical_positions.dtype
    lo, hi = sdf_field.grid.box
    n = canonical_positions.shape[0]
    log_target = math.log(target_world_scale) - primitive_scales.log()  # per-axis raw target

    def sdf_samples(m: int) -> Tensor:
        uni = torch.rand(m // 2, 3, generator=gen, dtype=dtype) * (hi - lo) + lo
        pick = torch.randint(0, n, (m - m // 2,), generator=gen)
        near = canonical_positions[pick] + noise_std * torch.randn(
            m - m // 2, 3, generator=gen, dtype=dtype
        )
        return torch.cat([uni, near])

    held_pts = sdf_samples(2048)
    held_sdf = sdf_target(held_pts)
    held_pick = torch.randint(0, n, (2048,), generator=gen)

    opt = torch.optim.Adam(
        list(attr_field.parameters()) + list(sdf_field.parameters()), lr=lr
    )
    report = None
    for step in range(1, max_steps + 1):
        pick = torch.randint(0, n, (min(batch, n),), generator=gen)
        raw = attr_field(canonical_positions[pick])
        loss_scale = ((raw[:, :3] - log_target[pick]) ** 2).mean()
        loss_rest = (raw[:, 3:] ** 2).mean()
        pts = sdf_samples(batch)
        loss_sdf = ((sdf_field(pts) - sdf_target(pts)) ** 2).mean()
        loss = loss_scale + 0.1 * loss_rest + loss_sdf
        opt.zero_grad()
        loss.backward()
        opt.step()

        if step % 100 == 0 or step == max_steps:
            with torch.no_grad():
                _, _, s = eval_attributes(attr_field, canonical_positions[held_pick])
                world = s * primitive_scales[held_pick]
                scale_err = ((world - target_world_scale).abs() / target_world_scale).mean()
                sdf_err = (eval_sdf(sdf_field, held_pts) - held_sdf).abs().mean()
            report = PretrainReport(step, float(scale_err), float(sdf_err))
            if scale_err < scale_tol and sdf_err < sdf_tol:
                return report
        if step == int(max_steps * 0.6):
            for g in opt.param_groups:
                g["lr"] = lr * 0.3

    raise ConvergenceError(
        f"field pretraining did not converge in {max_steps} steps: "
        f"scale rel err {report.scale_rel_err:.4f} (tol {scale_tol}), "
        f"sdf abs err {report.sdf_abs_err * 1000:.2f} mm (tol {sdf_tol * 1000:.1f} mm)"
    )
