"""Differentiable tile-based Gaussian splatting on the CPU.

Forward: EWA-style projection to screen-space Gaussians, 16x16 tile binning,
front-to-back alpha compositing with early termination. Backward: analytic
gradients for splat means, covariances, colors, and opacities; everything
upstream (projection, SH, fields) chains through autograd.

Compositing is pair-major: each (splat, tile) pair owns a row of 256 pixel
alphas, and per-tile transmittance comes from segmented cumulative sums of
log(1 - alpha) in float64, so no padding work is done and tiles of wildly
different depth complexity cost only what they contain.

A splat's support is truncated to the tiles overlapped by its 3-sigma screen
bounding box; the brute-force reference renderer in the test suite applies
the identical truncation rule, which is part of the rendering contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .camera import Camera
from .errors import ParameterError
from .sh import eval_sh
from .transforms import quat_to_mat

TILE = 16
PIX = TILE * TILE
COV_FLOOR = 0.3  # px^2 added to the diagonal; anti-aliasing floor
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_EPS = 1e-4
_LOG_EPS = math.log(TRANSMITTANCE_EPS)
NEAR_PLANE = 0.01

_ROW_BUDGET = 8192  # pair rows per compositing chunk


@dataclass
class Splats:
    """Projected 2D Gaussians (visible subset of the input batch)."""

    means: Tensor  # (M, 2) pixels
    covs: Tensor  # (M, 2, 2) pixels^2, floor-regularized SPD
    depths: Tensor  # (M,) meters
    colors: Tensor  # (M, 3) view-evaluated RGB in [0, 1]
    opacities: Tensor  # (M,)
    source_index: Tensor  # (M,) long, index into the pre-cull batch

    @property
    def count(self) -> int:
        return self.means.shape[0]


@dataclass
class RenderTarget:
    image: Tensor  # (H, W, 3) in [0, 1]
    alpha: Tensor  # (H, W) in [0, 1]


def project(
    world_pos: Tensor,
    world_rot: Tensor,
    world_scale: Tensor,
    sh_coeffs: Tensor,
    opacities: Tensor,
    cam: Camera,
    near: float = NEAR_PLANE,
) -> Splats:
    """Project world Gaussians to screen splats, culling by near plane and
    the 3-sigma frustum margin."""
    dtype = world_pos.dtype
    rot_wc = cam.rot.to(dtype)
    pc = world_pos @ rot_wc.T + cam.trans.to(dtype)
    z = pc[:, 2]
    vis = z > near
    if not bool(vis.any()):
        return _empty_splats(dtype)
    pc = pc[vis]
    z = z[vis]
    idx0 = vis.nonzero().squeeze(-1)

    # perspective means
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy
    means = torch.stack([u, v], dim=-1)

    # world covariance: R diag(s)^2 R^T, rotated into the camera frame
    rmat = quat_to_mat(world_rot[vis])
    m = rmat * world_scale[vis].unsqueeze(-2)
    cov_w = m @ m.transpose(-1, -2)
    cov_c = rot_wc @ cov_w @ rot_wc.T

    # Jacobian of perspective projection, with the usual tangent clamp that
    # keeps the linearization sane for points far outside the view cone
    lim_x = 1.3 * (cam.width / 2) / cam.fx
    lim_y = 1.3 * (cam.height / 2) / cam.fy
    tx = z * torch.clamp(pc[:, 0] / z, -lim_x, lim_x)
    ty = z * torch.clamp(pc[:, 1] / z, -lim_y, lim_y)
    zero = torch.zeros_like(z)
    jrow0 = torch.stack([cam.fx / z, zero, -cam.fx * tx / z**2], dim=-1)
    jrow1 = torch.stack([zero, cam.fy / z, -cam.fy * ty / z**2], dim=-1)
    jac = torch.stack([jrow0, jrow1], dim=-2)  # (M, 2, 3)
    cov2d = jac @ cov_c @ jac.transpose(-1, -2)
    cov2d = cov2d + COV_FLOOR * torch.eye(2, dtype=dtype)

    # view-dependent color
    view_dir = world_pos[vis] - cam.center.to(dtype)
    view_dir = view_dir / view_dir.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    colors = eval_sh(sh_coeffs[vis], view_dir).clamp(0.0, 1.0)

    # frustum cull with the 3-sigma tile footprint
    radii = splat_radius(cov2d.detach())
    tx0, tx1, ty0, ty1 = tile_ranges(means.detach(), radii, cam.width, cam.height)
    keep = (tx1 > tx0) & (ty1 > ty0)
    if not bool(keep.any()):
        return _empty_splats(dtype)
    return Splats(
        means=means[keep],
        covs=cov2d[keep],
        depths=z[keep],
        colors=colors[keep],
        opacities=opacities[vis][keep],
        source_index=idx0[keep],
    )


def _empty_splats(dtype) -> Splats:
    return Splats(
        means=torch.zeros(0, 2, dtype=dtype),
        covs=torch.zeros(0, 2, 2, dtype=dtype),
        depths=torch.zeros(0, dtype=dtype),
        colors=torch.zeros(0, 3, dtype=dtype),
        opacities=torch.zeros(0, dtype=dtype),
        source_index=torch.zeros(0, dtype=torch.long),
    )


def splat_radius(cov2d: Tensor) -> Tensor:
    """3-sigma pixel radius from the larger covariance eigenvalue."""
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = (a + c) / 2
    disc = ((a - c) / 2) ** 2 + b**2
    lam_max = mid + disc.clamp_min(0).sqrt()
    return torch.ceil(3 * lam_max.clamp_min(0).sqrt())


def tile_ranges(
    means: Tensor, radii: Tensor, width: int, height: int
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Half-open tile index ranges [tx0, tx1) x [ty0, ty1) per splat."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    tx0 = ((means[:, 0] - radii) / TILE).floor().clamp(0, tiles_x).long()
    tx1 = (((means[:, 0] + radii) / TILE).floor() + 1).clamp(0, tiles_x).long()
    ty0 = ((means[:, 1] - radii) / TILE).floor().clamp(0, tiles_y).long()
    ty1 = (((means[:, 1] + radii) / TILE).floor() + 1).clamp(0, tiles_y).long()
    return tx0, tx1, ty0, ty1


def _conic(covs: Tensor) -> Tensor:
    """(M,2,2) SPD -> (M,3) inverse packed as (a, b, c) of [[a,b],[b,c]]."""
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=-1)


@dataclass
class PairTable:
    """Per-(splat, tile) rows sorted by (tile, depth, splat index)."""

    sid: Tensor  # (P,) splat index per row
    tiles: Tensor  # (B,) active tile ids
    row_tile: Tensor  # (P,) index into `tiles` per row
    tile_start: Tensor  # (B,) first row of each tile
    tile_count: Tensor  # (B,)
    tiles_x: int

    @property
    def rows(self) -> int:
        return self.sid.shape[0]


def _build_pairs(splats: Splats, width: int, height: int) -> PairTable | None:
    """Duplicate splats per overlapped tile and sort by (tile, depth, index)."""
    radii = splat_radius(splats.covs.detach())
    tx0, tx1, ty0, ty1 = tile_ranges(splats.means.detach(), radii, width, height)
    tiles_x = (width + TILE - 1) // TILE
    spans = ((tx1 - tx0) * (ty1 - ty0)).clamp_min(0)
    total = int(spans.sum())
    if total == 0:
        return None
    sid = torch.repeat_interleave(torch.arange(splats.count), spans)
    offs = torch.arange(total) - torch.repeat_interleave(spans.cumsum(0) - spans, spans)
    w_span = (tx1 - tx0)[sid]
    tile = (ty0[sid] + offs // w_span) * tiles_x + tx0[sid] + offs % w_span

    # rows start in splat-index order; stable depth sort keeps index tiebreak,
    # then a stable tile sort yields per-tile front-to-back order
    order = torch.argsort(splats.depths.detach()[sid], stable=True)
    sid, tile = sid[order], tile[order]
    order = torch.argsort(tile, stable=True)
    sid, tile = sid[order], tile[order]

    first = torch.ones_like(tile, dtype=torch.bool)
    first[1:] = tile[1:] != tile[:-1]
    row_tile = first.cumsum(0) - 1
    tile_start = first.nonzero().squeeze(-1)
    tiles = tile[tile_start]
    count = torch.diff(torch.cat([tile_start, torch.tensor([tile.numel()])]))
    return PairTable(
        sid=sid, tiles=tiles, row_tile=row_tile,
        tile_start=tile_start, tile_count=count, tiles_x=tiles_x,
    )


def _tile_pixels(tiles: Tensor, tiles_x: int, dtype) -> tuple[Tensor, Tensor]:
    """Pixel-center coordinates of each tile, (B, PIX) each axis."""
    ly, lx = torch.meshgrid(
        torch.arange(TILE, dtype=dtype), torch.arange(TILE, dtype=dtype), indexing="ij"
    )
    px = (tiles % tiles_x).to(dtype).reshape(-1, 1) * TILE + lx.reshape(-1) + 0.5
    py = (tiles // tiles_x).to(dtype).reshape(-1, 1) * TILE + ly.reshape(-1) + 0.5
    return px, py


def _scatter_index(tiles: Tensor, tiles_x: int, width: int, height: int) -> Tensor:
    """Flat pixel index per (tile, local pixel); -1 outside the image."""
    ly, lx = torch.meshgrid(torch.arange(TILE), torch.arange(TILE), indexing="ij")
    gx = (tiles % tiles_x).reshape(-1, 1) * TILE + lx.reshape(-1)
    gy = (tiles // tiles_x).reshape(-1, 1) * TILE + ly.reshape(-1)
    flat = gy * width + gx
    flat[(gx >= width) | (gy >= height)] = -1
    return flat


def _tile_chunks(pt: PairTable, budget: int = _ROW_BUDGET):
    """Yield (tile lo, tile hi, row lo, row hi): whole tiles per chunk."""
    n_tiles = pt.tiles.numel()
    t0 = 0
    while t0 < n_tiles:
        r0 = int(pt.tile_start[t0])
        t1 = t0 + 1
        while t1 < n_tiles and int(pt.tile_start[t1]) - r0 < budget:
            t1 += 1
        r1 = int(pt.tile_start[t1]) if t1 < n_tiles else pt.rows
        yield t0, t1, r0, r1
        t0 = t1


def _row_alphas(pt, lo, hi, means, conics, opacities, px, py, t_lo):
    """Alpha rows for pairs [lo, hi): (R, PIX), plus gauss and deltas."""
    sid = pt.sid[lo:hi]
    seg = pt.row_tile[lo:hi] - t_lo
    mu = means[sid]  # (R, 2)
    con = conics[sid]  # (R, 3)
    dx = px[seg] - mu[:, 0:1]  # (R, PIX)
    dy = py[seg] - mu[:, 1:2]
    power = (-0.5 * con[:, 0:1]) * dx * dx
    power = power.addcmul_((-0.5 * con[:, 2:3]) * dy, dy)
    power = power.addcmul_((-con[:, 1:2]) * dx, dy)
    # alphas below exp(-15) fall under the 1/255 skip regardless; clamping
    # keeps exp() off the denormal slow path
    gauss = power.clamp_(min=-15.0).exp_()  # power buffer reused
    alpha = (gauss * opacities[sid].unsqueeze(-1)).clamp_(max=ALPHA_CLAMP)
    alpha = alpha.masked_fill_(alpha < ALPHA_SKIP, 0.0)
    return sid, seg, alpha, gauss, dx, dy


def _transmittance(alpha: Tensor, seg: Tensor, n_seg: int):
    """Segmented exclusive products T_i = prod_{j<i in segment} (1 - alpha_j),
    the processed mask, and the per-segment final transmittance.

    Log-space segmented sums: early termination makes per-pixel depth shallow,
    which keeps the accumulated rounding far below the renderer's 1e-5
    equivalence contract."""
    la = torch.log1p(alpha.neg())
    # exclusive running sum = inclusive cumsum minus own term; cumsum runs on
    # the transposed copy because dim-0 cumsum on strided input is scalar
    exc = la.t().contiguous().cumsum(-1).t().sub_(la)
    first = torch.ones(seg.numel(), dtype=torch.bool)
    first[1:] = seg[1:] != seg[:-1]
    base = exc[first.nonzero().squeeze(-1)]  # (n_seg, PIX) sum before segment
    log_t = exc.sub_(base[seg])
    processed = log_t >= _LOG_EPS
    t_excl = log_t.exp_()
    # final transmittance freezes at termination: unprocessed factors drop out
    la_end = la.masked_fill_(~processed, 0.0)
    t_end = torch.zeros(n_seg, PIX, dtype=la.dtype).index_add_(0, seg, la_end)
    return t_excl, processed, t_end.exp_()


def _forward_core(
    means: Tensor,
    covs: Tensor,
    colors: Tensor,
    opacities: Tensor,
    pt: PairTable | None,
    width: int,
    height: int,
    background: Tensor,
):
    dtype = means.dtype
    n_pix = height * width
    img = torch.zeros(n_pix, 3, dtype=dtype)
    trans = torch.ones(n_pix, dtype=dtype)
    if pt is not None:
        conics = _conic(covs)
        px_all, py_all = _tile_pixels(pt.tiles, pt.tiles_x, dtype)
        flat_all = _scatter_index(pt.tiles, pt.tiles_x, width, height)
        for t0, t1, r0, r1 in _tile_chunks(pt):
            sid, seg, alpha, _, _, _ = _row_alphas(
                pt, r0, r1, means, conics, opacities, px_all[t0:t1], py_all[t0:t1], t0
            )
            t_excl, processed, t_end = _transmittance(alpha, seg, t1 - t0)
            w = alpha * t_excl * processed
            acc = torch.zeros(t1 - t0, PIX, 3, dtype=dtype)
            acc.index_add_(0, seg, w.unsqueeze(-1) * colors[sid].unsqueeze(1))
            flat = flat_all[t0:t1]
            ok = flat >= 0
            img[flat[ok]] = acc.reshape(-1, 3)[ok.reshape(-1)]
            trans[flat[ok]] = t_end.reshape(-1)[ok.reshape(-1)]
    img = img + trans.unsqueeze(-1) * background
    return img.reshape(height, width, 3), (1 - trans).reshape(height, width)


def _backward_core(
    means: Tensor,
    covs: Tensor,
    colors: Tensor,
    opacities: Tensor,
    pt: PairTable | None,
    width: int,
    height: int,
    background: Tensor,
    d_img: Tensor,
    d_alpha: Tensor,
):
    """Analytic gradients for (means, covs, colors, opacities, background)."""
    dtype = means.dtype
    g_mean = torch.zeros_like(means)
    g_conic = torch.zeros(means.shape[0], 3, dtype=dtype)
    g_color = torch.zeros_like(colors)
    g_opa = torch.zeros_like(opacities)
    d_img_flat = d_img.reshape(-1, 3)
    d_alpha_flat = d_alpha.reshape(-1)
    trans_full = torch.ones(height * width, dtype=dtype)

    if pt is not None:
        conics = _conic(covs)
        px_all, py_all = _tile_pixels(pt.tiles, pt.tiles_x, dtype)
        flat_all = _scatter_index(pt.tiles, pt.tiles_x, width, height)
        for t0, t1, r0, r1 in _tile_chunks(pt):
            n_seg = t1 - t0
            sid, seg, alpha, gauss, dx, dy = _row_alphas(
                pt, r0, r1, means, conics, opacities, px_all[t0:t1], py_all[t0:t1], t0
            )
            t_excl, processed, t_end = _transmittance(alpha, seg, n_seg)
            w = alpha * t_excl * processed

            flat = flat_all[t0:t1]
            ok = flat >= 0
            dc_tile = torch.zeros(n_seg, PIX, 3, dtype=dtype)
            dc_tile.reshape(-1, 3)[ok.reshape(-1)] = d_img_flat[flat[ok]]
            da_tile = torch.zeros(n_seg, PIX, dtype=dtype)
            da_tile.reshape(-1)[ok.reshape(-1)] = d_alpha_flat[flat[ok]]
            trans_full[flat[ok]] = t_end.reshape(-1)[ok.reshape(-1)]

            # color gradient dC/dc_i = w_i, and the projection of each row's
            # color onto the upstream image gradient in one bmm pass
            dc_rows = dc_tile[seg]  # (R, PIX, 3)
            g_color.index_add_(0, sid, torch.bmm(w.unsqueeze(1), dc_rows).squeeze(1))
            cdotd = torch.bmm(dc_rows, colors[sid].unsqueeze(-1)).squeeze(-1)  # (R, PIX)

            # suffix term S_i . dC reduces to a scalar segmented suffix sum of
            # w_j (c_j . dC_j) plus the background tail
            wc_d = w * cdotd
            cum = wc_d.t().contiguous().cumsum(-1).t()
            first_rows = torch.ones(seg.numel(), dtype=torch.bool)
            first_rows[1:] = seg[1:] != seg[:-1]
            fr_idx = first_rows.nonzero().squeeze(-1)
            base = cum[fr_idx] - wc_d[fr_idx]  # cumulative before segment start
            prefix_incl = cum - base[seg]
            total = torch.zeros(n_seg, PIX, dtype=dtype).index_add_(0, seg, wc_d)
            t_end_rows = t_end[seg]
            bg_d = dc_tile @ background  # (n_seg, PIX)
            suffix_d = total[seg] - prefix_incl + t_end_rows * bg_d[seg]

            alpha_eff = alpha * processed
            one_m = (1 - alpha_eff).clamp_min(1e-6)
            d_alpha_rows = t_excl * cdotd - suffix_d / one_m
            d_alpha_rows = d_alpha_rows + (t_end_rows / one_m) * da_tile[seg]
            d_alpha_rows = d_alpha_rows * (alpha_eff > 0)

            unclamped = (opacities[sid].unsqueeze(-1) * gauss < ALPHA_CLAMP).to(dtype)
            d_og = d_alpha_rows * unclamped
            g_opa.index_add_(0, sid, (d_og * gauss).sum(-1))
            d_power = d_og * opacities[sid].unsqueeze(-1) * gauss
            con = conics[sid]
            g_mx = (d_power * (con[:, 0:1] * dx + con[:, 1:2] * dy)).sum(-1)
            g_my = (d_power * (con[:, 1:2] * dx + con[:, 2:3] * dy)).sum(-1)
            g_mean.index_add_(0, sid, torch.stack([g_mx, g_my], dim=-1))
            g_conic.index_add_(
                0,
                sid,
                torch.stack(
                    [
                        (d_power * (-0.5 * dx * dx)).sum(-1),
                        (d_power * (-dx * dy)).sum(-1),
                        (d_power * (-0.5 * dy * dy)).sum(-1),
                    ],
                    dim=-1,
                ),
            )

    # chain conic -> covariance: dCov = -Cinv dConic Cinv (symmetric)
    conics = _conic(covs)
    q = torch.zeros(means.shape[0], 2, 2, dtype=dtype)
    q[:, 0, 0] = g_conic[:, 0]
    q[:, 0, 1] = g_conic[:, 1] / 2
    q[:, 1, 0] = g_conic[:, 1] / 2
    q[:, 1, 1] = g_conic[:, 2]
    cmat = torch.zeros_like(q)
    cmat[:, 0, 0] = conics[:, 0]
    cmat[:, 0, 1] = conics[:, 1]
    cmat[:, 1, 0] = conics[:, 1]
    cmat[:, 1, 1] = conics[:, 2]
    g_cov = -cmat @ q @ cmat

    g_bg = (trans_full.unsqueeze(-1) * d_img.reshape(-1, 3)).sum(0)
    return g_mean, g_cov, g_color, g_opa, g_bg


class _RasterizeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, covs, colors, opacities, depths, background, width, height):
        pt = _build_pairs(
            Splats(means.detach(), covs.detach(), depths, colors.detach(),
                   opacities.detach(), torch.arange(means.shape[0])),
            width, height,
        )
        img, alpha = _forward_core(
            means.detach(), covs.detach(), colors.detach(), opacities.detach(),
            pt, width, height, background.detach(),
        )
        ctx.save_for_backward(means, covs, colors, opacities, background)
        ctx.pairs = pt
        ctx.size = (width, height)
        return img, alpha

    @staticmethod
    def backward(ctx, d_img, d_alpha):
        means, covs, colors, opacities, background = ctx.saved_tensors
        width, height = ctx.size
        g_mean, g_cov, g_color, g_opa, g_bg = _backward_core(
            means.detach(), covs.detach(), colors.detach(), opacities.detach(),
            ctx.pairs, width, height, background.detach(),
            d_img.contiguous(), d_alpha.contiguous(),
        )
        return g_mean, g_cov, g_color, g_opa, None, g_bg, None, None


def rasterize(
    splats: Splats, background: Tensor, width: int, height: int
) -> RenderTarget:
    """Composite projected splats front-to-back; differentiable w.r.t. splat
    fields and background through a hand-written analytic backward."""
    if splats.count == 0:
        img = background.reshape(1, 1, 3).expand(height, width, 3).clone()
        alpha = torch.zeros(height, width, dtype=background.dtype)
        return RenderTarget(image=img, alpha=alpha)
    img, alpha = _RasterizeFn.apply(
        splats.means, splats.covs, splats.colors, splats.opacities,
        splats.depths.detach(), background, width, height,
    )
    return RenderTarget(image=img, alpha=alpha)


@dataclass
class SplatGrads:
    means: Tensor
    covs: Tensor
    colors: Tensor
    opacities: Tensor
    background: Tensor


def rasterize_backward(
    splats: Splats,
    background: Tensor,
    width: int,
    height: int,
    d_img: Tensor,
    d_alpha: Tensor,
) -> SplatGrads:
    """Standalone analytic backward pass for a given upstream gradient."""
    if d_img.shape != (height, width, 3) or d_alpha.shape != (height, width):
        raise ParameterError("upstream gradient shape mismatch")
    pt = _build_pairs(splats, width, height)
    g = _backward_core(
        splats.means.detach(), splats.covs.detach(), splats.colors.detach(),
        splats.opacities.detach(), pt, width, height, background.detach(),
        d_img, d_alpha,
    )
    return SplatGrads(*g)
