"""Acceptance suite: one test per headline criterion, each printing a
PASS/FAIL line with its measured numbers."""

import math
import os
import time

import pytest
import torch

from gavatar.bank import to_world
from gavatar.fields import OpacityKernel, opacity
from gavatar.rig import Primitives
from gavatar.splat import Splats, rasterize, rasterize_backward
from gavatar.tetmesh import TetGrid, euler_characteristic, is_watertight, marching_tets
from gavatar.transforms import quat_mul, quat_normalize, quat_to_mat
from oracles import finite_diff, random_splat_scene, reference_rasterize, rel_err


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------- kernel law

def test_kernel_law():
    t0 = time.perf_counter()
    kernel = OpacityKernel(gamma=1.7, lam=220.0)
    gamma = float(kernel.gamma)
    peak = float(opacity(kernel, torch.tensor(0.0, dtype=torch.float64)))
    peak_exact = peak == gamma / 4

    x = torch.linspace(1e-6, 0.5, 1000, dtype=torch.float64)
    sym = float((opacity(kernel, x) - opacity(kernel, -x)).abs().max())
    v = opacity(kernel, x)
    monotone = bool((v[1:] < v[:-1]).all())
    dt = time.perf_counter() - t0
    report(
        "kernel law",
        peak_exact and sym <= 1e-12 and monotone and dt < 1.0,
        f"K(0)-gamma/4 = {peak - gamma / 4:g}, symmetry {sym:g}, "
        f"monotone {monotone}, {dt:.3f}s",
    )


# ------------------------------------------------------------- transform law

def test_transform_law():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    n = 1000
    dtype = torch.float64
    prims = Primitives(
        positions=torch.randn(n, 3, dtype=dtype),
        rotations=quat_normalize(torch.randn(n, 4, dtype=dtype)),
        scales=torch.rand(n, 3, dtype=dtype) + 0.05,
    )
    p = torch.randn(n, 3, dtype=dtype)
    r = quat_normalize(torch.randn(n, 4, dtype=dtype))
    s = torch.rand(n, 3, dtype=dtype) + 0.05
    wp, wr, ws = to_world(p, r, s, prims, torch.arange(n))
    rigid_q = quat_normalize(torch.randn(4, dtype=dtype))
    rigid_t = torch.randn(3, dtype=dtype)
    m = quat_to_mat(rigid_q)
    direct = wp @ m.T + rigid_t
    folded = Primitives(
        positions=prims.positions @ m.T + rigid_t,
        rotations=quat_mul(rigid_q.expand(n, 4), prims.rotations),
        scales=prims.scales,
    )
    wp2, _, _ = to_world(p, r, s, folded, torch.arange(n))
    pos_err = float((direct - wp2).abs().max())

    # identity primitive on exactly-representable unit quaternions
    idq = torch.tensor([[1.0, 0, 0, 0]])
    exact_q = torch.tensor([[0.6, 0.8, 0.0, 0.0], [1.0, 0, 0, 0], [0.0, 0, 0.6, 0.8]])
    pts = torch.tensor([[0.25, -0.5, 0.75]]).expand(3, 3)
    ident = Primitives(positions=torch.zeros(1, 3), rotations=idq, scales=torch.ones(1, 3))
    op, orot, osc = to_world(pts, exact_q, torch.full((3, 3), 0.5), ident, torch.zeros(3, dtype=torch.long))
    identity_exact = (
        torch.equal(op, pts) and torch.equal(orot, exact_q) and torch.equal(osc, torch.full((3, 3), 0.5))
    )
    dt = time.perf_counter() - t0
    report(
        "transform law",
        pos_err < 1e-6 and identity_exact and dt < 1.0,
        f"composed-transform err {pos_err:.2e}, identity exact {identity_exact}, {dt:.3f}s",
    )


# ----------------------------------------------------------- differentiability

def test_differentiability_suite():
    t0 = time.perf_counter()
    worst = {}

    # rasterizer, float64 then float32
    for dtype, tol, tag in ((torch.float64, 1e-3, "raster f64"), (torch.float32, 1e-2, "raster f32")):
        splats = random_splat_scene(12, 48, 48, 21, dtype=dtype)
        bg = torch.tensor([0.2, 0.3, 0.4], dtype=dtype)
        gen = torch.Generator().manual_seed(0)
        d_img = torch.randn(48, 48, 3, generator=gen, dtype=dtype)
        d_alpha = torch.randn(48, 48, generator=gen, dtype=dtype)
        grads = rasterize_backward(splats, bg, 48, 48, d_img, d_alpha)

        # FD runs on the float64 twin; the gradients under test keep `dtype`
        fd_splats = Splats(
            splats.means.double(), splats.covs.double(), splats.depths.double(),
            splats.colors.double(), splats.opacities.double(), splats.source_index,
        )
        fd_dimg, fd_dalpha, fd_bg = d_img.double(), d_alpha.double(), bg.double()

        def loss():
            rt = rasterize(fd_splats, fd_bg, 48, 48)
            return (rt.image * fd_dimg).sum() + (rt.alpha * fd_dalpha).sum()

        errs = []
        for field, grad in (("opacities", grads.opacities), ("means", grads.means), ("colors", grads.colors)):
            tensor = getattr(fd_splats, field)
            flat = grad.reshape(-1)
            for idx in torch.argsort(flat.abs(), descending=True)[:3].tolist():
                if abs(float(flat[idx])) < 1e-7:
                    continue
                index = tuple(i.item() for i in torch.unravel_index(torch.tensor(idx), tensor.shape))
                errs.append(rel_err(finite_diff(loss, tensor.data, index, 1e-6), float(flat[idx])))
        worst[tag] = (max(errs), tol)

    # SDF field parameters + positions (float64)
    from gavatar.fields import SdfField

    torch.manual_seed(1)
    sdf = SdfField(n_levels=4, log2_table=10).double()
    pts = torch.rand(64, 3, dtype=torch.float64) * 1.6 - 0.8

    def sdf_loss():
        return (sdf(pts) ** 2).mean()

    sdf_loss().backward()
    errs = []
    for _, param in list(sdf.named_parameters()):
        g = param.grad.reshape(-1)
        idx = int(torch.argmax(g.abs()))
        if abs(float(g[idx])) < 1e-10:
            continue
        errs.append(rel_err(finite_diff(sdf_loss, param.data.reshape(-1), (idx,), 1e-6), float(g[idx])))
    worst["sdf field f64"] = (max(errs), 1e-3)

    # attribute field
    from gavatar.fields import AttributeField

    attr = AttributeField(n_levels=4, log2_table=10).double()
    with torch.no_grad():
        attr.mlp[-1].weight.normal_(std=0.1)

    def attr_loss():
        return (attr(pts) ** 2).mean()

    attr_loss().backward()
    errs = []
    for _, param in list(attr.named_parameters()):
        g = param.grad.reshape(-1)
        idx = int(torch.argmax(g.abs()))
        if abs(float(g[idx])) < 1e-10:
            continue
        errs.append(rel_err(finite_diff(attr_loss, param.data.reshape(-1), (idx,), 1e-6), float(g[idx])))
    worst["attr field f64"] = (max(errs), 1e-3)

    # mesh rasterizer mask w.r.t. a silhouette vertex
    from gavatar.camera import look_at
    from gavatar.meshrender import rasterize_mesh
    from gavatar.tetmesh import TriMesh, compute_vertex_normals

    v = torch.tensor([[-0.5, -0.5, 2.0], [0.7, -0.4, 2.0], [0.0, 0.8, 2.0]],
                     dtype=torch.float64, requires_grad=True)
    f = torch.tensor([[0, 1, 2]])
    cam = look_at((0.0, 0.0, 0.0), (0.0, 0.0, 2.0), 48, 48, fov_y_deg=60.0, dtype=torch.float64)
    probe = torch.randn(48, 48, generator=torch.Generator().manual_seed(2), dtype=torch.float64)

    def mask_loss():
        mesh = TriMesh(vertices=v, faces=f, normals=compute_vertex_normals(v, f))
        _, mask = rasterize_mesh(mesh, cam)
        return (mask * probe).sum()

    mask_loss().backward()
    fd = finite_diff(mask_loss, v.data, (1, 0), 1e-5)
    worst["mesh raster f64"] = (rel_err(fd, float(v.grad[1, 0])), 1e-2)

    # end-to-end: marching tets + mesh raster back to SDF samples
    grid = TetGrid.build(8, box=(-1.0, 1.0), dtype=torch.float64)
    sdf_vals = (grid.vertices.norm(dim=-1) - 0.55).requires_grad_(True)
    cam8 = look_at((0.0, 0.0, -2.5), (0.0, 0.0, 0.0), 48, 48, dtype=torch.float64)

    def tets_loss():
        mesh = marching_tets(sdf_vals, grid)
        _, mask = rasterize_mesh(mesh, cam8)
        return (mask * probe).sum()

    tets_loss().backward()
    gidx = int(torch.argmax(sdf_vals.grad.abs()))
    fd = finite_diff(tets_loss, sdf_vals.data, (gidx,), 1e-5)
    worst["tets+raster f64"] = (rel_err(fd, float(sdf_vals.grad[gidx])), 1e-2)

    # losses: alpha (closed form) and eikonal on an analytic field
    from gavatar.geomloss import alpha_loss, eikonal_loss

    mask_t = torch.rand(8, 8, dtype=torch.float64)
    al = torch.rand(8, 8, dtype=torch.float64).requires_grad_(True)
    alpha_loss(mask_t, al).backward()
    fd = finite_diff(lambda: alpha_loss(mask_t, al), al.data, (3, 4), 1e-7)
    worst["alpha loss f64"] = (rel_err(fd, float(al.grad[3, 4])), 1e-3)

    dt = time.perf_counter() - t0
    ok = all(err < tol for err, tol in worst.values()) and dt < 120
    detail = ", ".join(f"{k} {err:.2e}" for k, (err, tol) in worst.items()) + f", {dt:.0f}s"
    report("differentiability", ok, detail)


# -------------------------------------------------------------- renderer oracle

def test_renderer_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        splats = random_splat_scene(1000, 64, 64, 100 + seed)
        bg = torch.tensor([0.15, 0.25, 0.35])
        rt = rasterize(splats, bg, 64, 64)
        img, alpha = reference_rasterize(splats, bg, 64, 64)
        worst = max(worst, float((rt.image - img).abs().max()), float((rt.alpha - alpha).abs().max()))
    dt = time.perf_counter() - t0
    report("renderer oracle", worst < 1e-5 and dt < 60,
           f"20 scenes x 1000 splats, max pixel diff {worst:.2e}, {dt:.0f}s")


# ------------------------------------------------------------ isosurface oracle

def test_isosurface_oracle():
    t0 = time.perf_counter()
    grid = TetGrid.build(32)  # 2.2 m box: 6.9 cm cells
    sdf = grid.vertices.norm(dim=-1) - 0.9
    mesh = marching_tets(sdf, grid)
    radial = float((mesh.vertices.norm(dim=-1) - 0.9).abs().mean())
    watertight = is_watertight(mesh)
    genus0 = euler_characteristic(mesh) == 2

    from gavatar.geomloss import eikonal_loss

    pts = torch.randn(2000, 3, dtype=torch.float64)
    eik = float(eikonal_loss(lambda p: p[:, 0], pts))
    dt = time.perf_counter() - t0
    report(
        "isosurface oracle",
        radial < 0.01 and watertight and genus0 and eik <= 1e-10 and dt < 30,
        f"mean radial err {radial * 100:.2f} cm, watertight {watertight}, "
        f"genus0 {genus0}, eikonal(analytic) {eik:g}, {dt:.0f}s",
    )


# -------------------------------------------------------------- paper constants

def test_paper_constants():
    t0 = time.perf_counter()
    from gavatar.bank import init_bank
    from gavatar.capsule import make_template
    from gavatar.body import compute_anchors
    from gavatar.config import TrainConfig

    cfg = TrainConfig()
    anchors = compute_anchors(make_template(), cfg.grid_n)
    k = anchors.count
    bank = init_bank(k, cfg.per_primitive)
    lr = cfg.lr
    checks = {
        "K = 4096": k == 4096,
        "N0 = 262144": bank.n_gaussians == 262_144,
        "densify every 100": cfg.densify_interval == 100,
        "cap 2e6": cfg.gaussian_cap == 2_000_000,
        "radius 3.5": cfg.camera.radius == 3.5,
        "elevation [-10,45]": cfg.camera.elevation_deg == (-10.0, 45.0),
        "lr positions 0.00016": lr.positions == 0.00016,
        "lr attr 0.001": lr.attr_field == 0.001,
        "lr sdf 0.0001": lr.sdf == 0.0001,
        "lr kernel 0.001": lr.kernel == 0.001,
        "lr correctives 0.0001": lr.correctives == 0.0001,
        "lr beta 0.0003": lr.beta == 0.0003,
    }
    dt = time.perf_counter() - t0
    bad = [k for k, v in checks.items() if not v]
    report("paper constants", not bad and dt < 1.0, f"{len(checks)} checks, failing: {bad or 'none'}")


# -------------------------------------------------- end-to-end reconstruction

def test_end_to_end_self_reconstruction(e2e_fit):
    psnr = e2e_fit["final_psnr"]
    minutes = e2e_fit["elapsed_s"] / 60
    threads = torch.get_num_threads()
    ok = e2e_fit["exit_code"] == 0 and psnr is not None and psnr >= 30.0
    # the 20-minute budget is stated for an 8-thread desktop CPU; enforce it
    # when that much parallelism is actually available
    if threads >= 8:
        ok = ok and minutes <= 20
    report(
        "end-to-end self-reconstruction",
        ok,
        f"PSNR {psnr:.2f} dB (>= 30), {minutes:.1f} min on {threads} threads, "
        f"exit {e2e_fit['exit_code']}",
    )


def test_densification_on_schedule(e2e_fit):
    interval = 100
    lines = [l for l in e2e_fit["metrics"] if "iter" in l]
    changes = [
        l["iter"] for prev, l in zip(lines, lines[1:])
        if l["n_gaussians"] != prev["n_gaussians"]
    ]
    ok = all(it % interval == 0 for it in changes)
    cap_ok = all(l["n_gaussians"] <= 2_000_000 for l in lines)
    report(
        "densification schedule",
        ok and cap_ok,
        f"count changes at iterations {changes[:8]}{'...' if len(changes) > 8 else ''}, all multiples of 100: {ok}",
    )


# ------------------------------------------------------- performance scaling

def test_performance_scaling(e2e_fit):
    from gavatar.bench import bench_row, render_frame_timed
    from gavatar.formats.checkpoint import load_checkpoint
    from gavatar.scene import bake
    from gavatar.training import CameraSampler

    t0 = time.perf_counter()
    r1 = bench_row(100_000, 512, 512, seed=0)
    r2 = bench_row(200_000, 512, 512, seed=0)
    ratio = r2["ms_raster"] / r1["ms_raster"]

    # baked vs field-backed playback at 1e5 Gaussians
    from gavatar.config import TrainConfig
    from gavatar.scene import build_scene

    cfg = TrainConfig(
        grid_n=16, per_primitive=392, resolution=256, natural_pose_iters=0,
        zoom_start=0, iterations=1, sdf_levels=16, attr_levels=8,
    )
    scene = build_scene(cfg)
    cam = CameraSampler(resolution=256).sample(torch.Generator().manual_seed(0))
    pose = scene.rest_pose()
    _, t_field = render_frame_timed(scene, pose, cam)
    _, t_field = render_frame_timed(scene, pose, cam)
    bake(scene)
    _, t_baked = render_frame_timed(scene, pose, cam)
    _, t_baked = render_frame_timed(scene, pose, cam)
    speedup = t_field.total_ms / t_baked.total_ms

    detail = (
        f"raster 1e5->2e5 ratio {ratio:.2f} (want 1.5-2.5), "
        f"baked speedup {speedup:.1f}x (want >= 5) at N={scene.bank.n_gaussians}"
    )
    # paper-configuration row, reported without a pass/fail gate
    if os.environ.get("GAVATAR_SKIP_PAPER_ROW") != "1":
        row = bench_row(2_500_000, 1024, 1024, seed=0, repeats=1)
        detail += (
            f"; paper row N=2.5M @1024^2: {row['ms_raster']:.0f} ms raster, "
            f"{row['fps']:.2f} fps (paper reports 100 fps / ~3 ms on RTX hardware)"
        )
    dt = time.perf_counter() - t0
    report("performance scaling", 1.5 <= ratio <= 2.5 and speedup >= 5, detail + f", {dt:.0f}s")


# ---------------------------------------------------------------- persistence

def test_persistence(e2e_fit, tmp_path):
    from gavatar.formats.checkpoint import load_checkpoint, save_checkpoint
    from gavatar.formats.meshio import load_obj, load_ply, save_obj, save_ply

    src = e2e_fit["checkpoint"]
    resaved = tmp_path / "resaved.gavc"
    scene = load_checkpoint(src)
    save_checkpoint(scene, resaved)
    byte_identical = src.read_bytes() == resaved.read_bytes()

    grid = TetGrid.build(24)
    from gavatar.fields import eval_sdf

    with torch.no_grad():
        mesh = marching_tets(eval_sdf(scene.sdf_field, grid.vertices), grid)
    from gavatar.texture import bake_texture

    bake_texture(mesh, scene.attr_field)
    obj = tmp_path / "m.obj"
    ply = tmp_path / "m.ply"
    save_obj(mesh, obj)
    save_ply(mesh, ply)
    verts, _ = load_obj(obj)
    rel = (verts - mesh.vertices).abs() / mesh.vertices.abs().clamp_min(1e-3)
    obj_ok = float(rel.max()) < 1e-6
    pverts, _, pcolors = load_ply(ply)
    ply_ok = float((pverts - mesh.vertices).abs().max()) < 1e-6 and pcolors.shape[1] == 3
    report(
        "persistence",
        byte_identical and obj_ok and ply_ok,
        f"checkpoint byte-identical {byte_identical}, OBJ reimport ok {obj_ok}, PLY ok {ply_ok}",
    )
