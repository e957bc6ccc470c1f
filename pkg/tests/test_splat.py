import math

import pytest
import torch

from gavatar.camera import Camera, look_at
from gavatar.sh import C0, eval_sh
from gavatar.splat import (
    Splats,
    project,
    rasterize,
    rasterize_backward,
)
from oracles import finite_diff, random_splat_scene, reference_rasterize, rel_err

IDENTITY_Q = torch.tensor([[1.0, 0.0, 0.0, 0.0]])
BG = torch.tensor([0.1, 0.2, 0.3])


def flat_splat(x, y, color, opacity, depth=2.0, var=1e6, dtype=torch.float32):
    """A splat so wide its alpha is constant over the image."""
    return dict(
        means=torch.tensor([[x, y]], dtype=dtype),
        covs=torch.tensor([[[var, 0.0], [0.0, var]]], dtype=dtype),
        depths=torch.tensor([depth], dtype=dtype),
        colors=torch.tensor([color], dtype=dtype),
        opacities=torch.tensor([opacity], dtype=dtype),
        source_index=torch.tensor([0]),
    )


def cat_splats(*ds):
    keys = ds[0].keys()
    return Splats(**{k: torch.cat([d[k] for d in ds]) for k in keys})


def test_project_on_axis_gaussian_hits_image_center():
    cam = look_at((0.0, 0.0, -3.5), (0.0, 0.0, 0.0), 128, 128)
    splats = project(
        torch.zeros(1, 3), IDENTITY_Q, torch.full((1, 3), 0.01),
        torch.zeros(1, 48), torch.ones(1), cam,
    )
    assert splats.count == 1
    assert torch.allclose(splats.means[0], torch.tensor([64.0, 64.0]), atol=1e-4)


def test_project_isotropic_covariance_matches_linearization():
    f, s, d = 2000.0, 0.01, 2.0
    cam = Camera(rot=torch.eye(3), trans=torch.tensor([0.0, 0.0, 0.0]),
                 fx=f, fy=f, cx=512.0, cy=512.0, width=1024, height=1024)
    splats = project(
        torch.tensor([[0.0, 0.0, d]]), IDENTITY_Q, torch.full((1, 3), s),
        torch.zeros(1, 48), torch.ones(1), cam,
    )
    expected = (f * s / d) ** 2
    cov = splats.covs[0]
    assert abs(cov[0, 0] - expected) / expected < 0.01
    assert abs(cov[1, 1] - expected) / expected < 0.01
    assert abs(cov[0, 1]) / expected < 0.01


def test_project_culls_behind_camera():
    cam = Camera(rot=torch.eye(3), trans=torch.zeros(3), fx=100, fy=100,
                 cx=32, cy=32, width=64, height=64)
    splats = project(
        torch.tensor([[0.0, 0.0, -0.1]]), IDENTITY_Q, torch.full((1, 3), 0.01),
        torch.zeros(1, 48), torch.ones(1), cam,
    )
    assert splats.count == 0


def test_project_culls_outside_frustum_margin():
    cam = Camera(rot=torch.eye(3), trans=torch.zeros(3), fx=100, fy=100,
                 cx=32, cy=32, width=64, height=64)
    splats = project(
        torch.tensor([[100.0, 0.0, 1.0]]), IDENTITY_Q, torch.full((1, 3), 0.001),
        torch.zeros(1, 48), torch.ones(1), cam,
    )
    assert splats.count == 0


def test_rasterize_empty_scene():
    empty = Splats(torch.zeros(0, 2), torch.zeros(0, 2, 2), torch.zeros(0),
                   torch.zeros(0, 3), torch.zeros(0), torch.zeros(0, dtype=torch.long))
    rt = rasterize(empty, BG, 32, 32)
    assert torch.equal(rt.image, BG.expand(32, 32, 3))
    assert torch.equal(rt.alpha, torch.zeros(32, 32))


def test_rasterize_single_opaque_splat_clamps_alpha():
    s = cat_splats(flat_splat(8.5, 8.5, (1.0, 0.0, 0.0), 1.0))
    rt = rasterize(s, BG, 16, 16)
    px = rt.image[8, 8]
    assert rt.alpha[8, 8] == pytest.approx(0.99, abs=1e-6)
    expected = 0.99 * torch.tensor([1.0, 0, 0]) + 0.01 * BG
    assert torch.allclose(px, expected, atol=1e-6)


def test_rasterize_two_splat_compositing():
    front = flat_splat(8.5, 8.5, (1.0, 0.0, 0.0), 0.5, depth=1.0)
    back = flat_splat(8.5, 8.5, (0.0, 0.0, 1.0), 1.0, depth=2.0)
    rt = rasterize(cat_splats(front, back), BG, 16, 16)
    expected = (
        0.5 * torch.tensor([1.0, 0, 0])
        + 0.5 * 0.99 * torch.tensor([0.0, 0, 1.0])
        + 0.5 * 0.01 * BG
    )
    assert torch.allclose(rt.image[8, 8], expected, atol=1e-6)
    assert rt.alpha[8, 8] == pytest.approx(1 - 0.5 * 0.01, abs=1e-6)


def test_depth_ties_break_by_index():
    a = flat_splat(8.5, 8.5, (1.0, 0.0, 0.0), 0.6, depth=1.0)
    b = flat_splat(8.5, 8.5, (0.0, 1.0, 0.0), 0.6, depth=1.0)
    rt = rasterize(cat_splats(a, b), BG, 16, 16)
    assert rt.image[8, 8, 0] > rt.image[8, 8, 1]  # index 0 composites first


def test_tile_renderer_matches_reference():
    worst = 0.0
    for seed in range(20):
        splats = random_splat_scene(1000, 64, 64, seed)
        rt = rasterize(splats, BG, 64, 64)
        img, alpha = reference_rasterize(splats, BG, 64, 64)
        worst = max(worst, float((rt.image - img).abs().max()), float((rt.alpha - alpha).abs().max()))
    assert worst < 1e-5


def test_alpha_monotone_in_opacity():
    torch.manual_seed(4)
    splats = random_splat_scene(50, 32, 32, 11)
    rt0 = rasterize(splats, BG, 32, 32)
    bumped = Splats(
        splats.means, splats.covs, splats.depths, splats.colors,
        (splats.opacities + 0.2).clamp(max=1.0), splats.source_index,
    )
    rt1 = rasterize(bumped, BG, 32, 32)
    assert (rt1.alpha - rt0.alpha >= -1e-6).all()
    assert rt0.alpha.min() >= 0 and rt0.alpha.max() <= 1
    assert torch.isfinite(rt0.image).all()


def test_rasterize_deterministic():
    splats = random_splat_scene(300, 48, 48, 5)
    a = rasterize(splats, BG, 48, 48)
    b = rasterize(splats, BG, 48, 48)
    assert torch.equal(a.image, b.image)


def test_backward_zero_upstream_gives_zero_gradients():
    splats = random_splat_scene(100, 32, 32, 2)
    g = rasterize_backward(splats, BG, 32, 32, torch.zeros(32, 32, 3), torch.zeros(32, 32))
    for t in (g.means, g.covs, g.colors, g.opacities, g.background):
        assert torch.equal(t, torch.zeros_like(t))


def _fd_check(splats, width, height, dtype, tol, n_probes=10):
    bg = BG.to(dtype)
    gen = torch.Generator().manual_seed(0)
    d_img = torch.randn(height, width, 3, generator=gen, dtype=dtype)
    d_alpha = torch.randn(height, width, generator=gen, dtype=dtype)
    grads = rasterize_backward(splats, bg, width, height, d_img, d_alpha)

    # finite differences run on the float64 twin of the scene so float32
    # forward noise does not drown the quotient; the analytic gradients under
    # test stay in the original dtype
    fd_splats = Splats(
        splats.means.double(), splats.covs.double(), splats.depths.double(),
        splats.colors.double(), splats.opacities.double(), splats.source_index,
    )
    fd_dimg, fd_dalpha, fd_bg = d_img.double(), d_alpha.double(), bg.double()

    def loss():
        rt = rasterize(fd_splats, fd_bg, width, height)
        return (rt.image * fd_dimg).sum() + (rt.alpha * fd_dalpha).sum()

    eps = 1e-6
    fields = {
        "opacities": grads.opacities,
        "means": grads.means,
        "colors": grads.colors,
    }
    checked = 0
    for name, grad in fields.items():
        tensor = getattr(fd_splats, name)
        flat_grad = grad.reshape(-1)
        order = torch.argsort(flat_grad.abs(), descending=True)
        for idx in order[: max(2, n_probes // len(fields))].tolist():
            an = float(flat_grad[idx])
            if abs(an) < 1e-8:
                continue
            index = torch.unravel_index(torch.tensor(idx), tensor.shape)
            fd = finite_diff(loss, tensor.data, tuple(i.item() for i in index), eps)
            assert rel_err(fd, an) < tol, (name, idx, fd, an)
            checked += 1
    # symmetric covariance probe
    i = int(torch.argmax(grads.covs[:, 0, 1].abs()))
    an = float(grads.covs[i, 0, 1] + grads.covs[i, 1, 0])
    with torch.no_grad():
        orig = fd_splats.covs[i].clone()
        fd_splats.covs[i, 0, 1] += eps
        fd_splats.covs[i, 1, 0] += eps
        plus = float(loss())
        fd_splats.covs[i] = orig
        fd_splats.covs[i, 0, 1] -= eps
        fd_splats.covs[i, 1, 0] -= eps
        minus = float(loss())
        fd_splats.covs[i] = orig
    assert rel_err((plus - minus) / (2 * eps), an) < tol
    assert checked >= 4


def test_backward_single_splat_fd_float64():
    splats = random_splat_scene(1, 32, 32, 7, dtype=torch.float64)
    with torch.no_grad():
        splats.means += torch.tensor([16.0, 16.0]) - splats.means[0]
        splats.opacities.fill_(0.7)
    _fd_check(splats, 32, 32, torch.float64, 1e-3)


def test_backward_ten_splats_fd_float64():
    splats = random_splat_scene(10, 48, 48, 3, dtype=torch.float64)
    _fd_check(splats, 48, 48, torch.float64, 1e-3)


def test_backward_ten_splats_fd_float32():
    splats = random_splat_scene(10, 48, 48, 13, dtype=torch.float32)
    _fd_check(splats, 48, 48, torch.float32, 1e-2)


def test_eval_sh_zero_coeffs_is_mid_gray():
    dirs = torch.tensor([[0.0, 0.0, 1.0]])
    assert torch.allclose(eval_sh(torch.zeros(1, 48), dirs), torch.full((1, 3), 0.5))


def test_eval_sh_degree0_constant():
    coeffs = torch.zeros(1, 48)
    coeffs.reshape(1, 3, 16)[0, :, 0] = torch.tensor([1.0, 2.0, -1.0])
    out = eval_sh(coeffs, torch.tensor([[0.0, 1.0, 0.0]]))
    expected = 0.5 + C0 * torch.tensor([1.0, 2.0, -1.0])
    assert torch.allclose(out[0], expected, atol=1e-6)
    # isotropy: any direction gives the same color
    for d in ([1.0, 0, 0], [0, 0, -1.0], [0.577350, 0.577350, 0.577350]):
        out2 = eval_sh(coeffs, torch.tensor([d]))
        assert torch.allclose(out2, out, atol=1e-6)


def test_eval_sh_uses_higher_bands():
    coeffs = torch.zeros(1, 48)
    coeffs.reshape(1, 3, 16)[0, 0, 2] = 1.0  # z-linear band on red
    up = eval_sh(coeffs, torch.tensor([[0.0, 0.0, 1.0]]))
    down = eval_sh(coeffs, torch.tensor([[0.0, 0.0, -1.0]]))
    assert up[0, 0] > down[0, 0]
