"""Training orchestration: Adam groups, samplers, composite loss, main loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import Tensor

from .bank import densify_prune, local_position_loss
from .body import BodyParams
from .camera import Camera, look_at
from .config import TrainConfig
from .errors import GuidanceError, ParameterError, TrainingAborted
from .fields import eval_sdf
from .geomloss import alpha_loss, eikonal_loss, eikonal_points, normal_consistency_loss
from .guidance import GuidanceContext
from .scene import Scene, query_attributes, render_scene, scene_primitives
from .splat import RenderTarget
from .tetmesh import TetGrid, marching_tets
from .meshrender import rasterize_mesh

log = logging.getLogger(__name__)

LOSS_ABORT = 1e6


class AdamState:
    """Adam with named parameter groups and per-group learning rates.

    A step with any non-finite gradient is skipped (logged and counted), so a
    single bad iteration cannot poison the moments.
    """

    def __init__(self, groups: dict[str, tuple[list[Tensor], float]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.groups: dict[str, dict] = {}
        for name, (params, lr) in groups.items():
            self.groups[name] = {
                "params": list(params),
                "lr": lr,
                "m": [torch.zeros_like(p) for p in params],
                "v": [torch.zeros_like(p) for p in params],
                "step": 0,
            }
        self.skipped = 0

    def zero_grad(self) -> None:
        for g in self.groups.values():
            for p in g["params"]:
                p.grad = None

    @torch.no_grad()
    def step(self) -> bool:
        for name, g in self.groups.items():
            for p in g["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    self.skipped += 1
                    log.warning("skipping Adam step: non-finite gradient in group %s", name)
                    return False
        for g in self.groups.values():
            if all(p.grad is None for p in g["params"]):
                continue
            g["step"] += 1
            t = g["step"]
            bc1 = 1 - self.beta1**t
            bc2 = 1 - self.beta2**t
            for p, m, v in zip(g["params"], g["m"], g["v"]):
                if p.grad is None:
                    continue
                grad = p.grad
                m.mul_(self.beta1).add_(grad, alpha=1 - self.beta1)
                v.mul_(self.beta2).addcmul_(grad, grad, value=1 - self.beta2)
                p.add_(-g["lr"] * (m / bc1) / ((v / bc2).sqrt() + self.eps))
        return True

    def replace_param(self, group: str, new_param: Tensor,
                      src: Tensor | None = None, fresh: Tensor | None = None) -> None:
        """Swap a single-tensor group's parameter after densification; moments
        follow `src` rows, zeroed where `fresh` marks spawned Gaussians."""
        g = self.groups[group]
        if len(g["params"]) != 1:
            raise ParameterError("replace_param expects a single-tensor group")
        if src is not None:
            for key in ("m", "v"):
                moved = g[key][0][src]
                if fresh is not None:
                    moved[fresh] = 0
                g[key][0] = moved
        else:
            g["m"] = [torch.zeros_like(new_param)]
            g["v"] = [torch.zeros_like(new_param)]
        g["params"] = [new_param]


def adam_groups_for_scene(scene: Scene) -> AdamState:
    lr = scene.config.lr
    return AdamState({
        "positions": ([scene.bank.positions], lr.positions),
        "attr_field": (list(scene.attr_field.parameters()), lr.attr_field),
        "sdf": (list(scene.sdf_field.parameters()), lr.sdf),
        "kernel": (list(scene.kernel.parameters()), lr.kernel),
        "correctives": (list(scene.correctives.parameters()), lr.correctives),
        "beta": ([scene.beta], lr.beta),
        "natural_pose": ([scene.theta_n], lr.natural_pose),
    })


BODY_PART_PRESETS = {
    # target (meters, body frame), orbit radius, fov richness
    "face": ((0.0, 0.56, 0.05), 0.7, 25.0, (-60.0, 60.0)),
    "back_head": ((0.0, 0.56, -0.03), 0.7, 25.0, (120.0, 240.0)),
    "arms": ((0.0, 0.25, 0.0), 1.6, 40.0, (0.0, 360.0)),
    "upper_body": ((0.0, 0.25, 0.0), 2.0, 40.0, (0.0, 360.0)),
    "lower_body": ((0.0, -0.5, 0.0), 2.0, 40.0, (0.0, 360.0)),
}
CAMERA_MODES = ("full_body",) + tuple(BODY_PART_PRESETS)


@dataclass
class CameraSampler:
    """Spherical full-body views plus body-part zoom presets."""

    resolution: int = 512
    radius: float = 3.5
    elevation_deg: tuple[float, float] = (-10.0, 45.0)
    fov_y_deg: tuple[float, float] = (-26.0, 45.0)
    azimuth_deg: tuple[float, float] = (0.0, 360.0)
    center: tuple[float, float, float] = (0.0, -0.1, 0.0)

    def sample_mode(self, gen: torch.Generator, zoom_active: bool) -> str:
        if not zoom_active:
            return "full_body"
        i = int(torch.randint(0, len(CAMERA_MODES), (1,), generator=gen))
        return CAMERA_MODES[i]

    def sample(self, gen: torch.Generator, mode: str = "full_body") -> Camera:
        u = torch.rand(3, generator=gen)
        if mode == "full_body":
            target = torch.tensor(self.center)
            radius = self.radius
            fov_lo, fov_hi = self.fov_y_deg
            az_lo, az_hi = self.azimuth_deg
        else:
            tgt, radius, fov_hi, (az_lo, az_hi) = BODY_PART_PRESETS[mode]
            target = torch.tensor(tgt)
            fov_lo = fov_hi
        az = math.radians(az_lo + float(u[0]) * (az_hi - az_lo))
        el_lo, el_hi = self.elevation_deg
        el = math.radians(el_lo + float(u[1]) * (el_hi - el_lo))
        # the configured fov range is stored verbatim; sampling clamps into
        # a physically valid span
        fov = fov_lo + float(u[2]) * (fov_hi - fov_lo)
        fov = min(max(fov, 1.0), 179.0)
        eye = target + radius * torch.tensor(
            [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
        )
        return look_at(eye, target, self.resolution, self.resolution, fov_y_deg=fov)


@dataclass
class PoseSampler:
    """Natural-pose phase first, then alternate with animation poses."""

    theta_n: Tensor
    beta: Tensor
    pose_bank: list[Tensor] = field(default_factory=list)
    natural_iters: int = 3000

    def sample(self, iteration: int, gen: torch.Generator) -> BodyParams:
        if iteration < self.natural_iters or not self.pose_bank:
            return BodyParams(pose=self.theta_n, shape=self.beta)
        if iteration % 2 == 0:
            return BodyParams(pose=self.theta_n, shape=self.beta)
        i = int(torch.randint(0, len(self.pose_bank), (1,), generator=gen))
        return BodyParams(pose=self.pose_bank[i].to(self.beta.dtype), shape=self.beta)


def total_loss(weights: dict[str, float], parts: dict[str, Tensor]) -> tuple[Tensor, dict]:
    """Weighted sum of loss terms; hard error naming any non-finite term."""
    total = None
    logd = {}
    for name, value in parts.items():
        v = value if torch.is_tensor(value) else torch.tensor(float(value))
        if not torch.isfinite(v):
            raise FloatingPointError(f"loss term {name!r} is non-finite")
        w = weights.get(name, 1.0)
        logd[f"loss_{name}"] = float(v.detach())
        term = w * v
        total = term if total is None else total + term
    logd["loss_total"] = float(total.detach())
    return total, logd


@dataclass
class ReferenceView:
    camera: Camera
    image: Tensor  # (H, W, 3) linear float


def psnr(a: Tensor, b: Tensor) -> float:
    mse = float(((a - b) ** 2).mean())
    return 10 * math.log10(1.0 / max(mse, 1e-12))


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    final_psnr: float | None = None


class Trainer:
    def __init__(self, scene: Scene, guidance, out_dir: str | Path,
                 ref_views: list[ReferenceView] | None = None,
                 holdout_views: list[ReferenceView] | None = None,
                 pose_bank: list[Tensor] | None = None):
        self.scene = scene
        self.guidance = guidance
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.refs = ref_views or []
        self.holdout = holdout_views or []
        self.pose_bank = pose_bank or []
        cfg = scene.config
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.camera_sampler = CameraSampler(
            resolution=cfg.resolution,
            radius=cfg.camera.radius,
            elevation_deg=cfg.camera.elevation_deg,
            fov_y_deg=cfg.camera.fov_y_deg,
            azimuth_deg=cfg.camera.azimuth_deg,
        )
        self.pose_sampler = PoseSampler(
            theta_n=scene.theta_n, beta=scene.beta,
            pose_bank=self.pose_bank, natural_iters=cfg.natural_pose_iters,
        )
        self.tet_grid = TetGrid.build(cfg.tet_resolution, dtype=scene.bank.positions.dtype)
        self.adam = None
        self.grad_accum = None
        self.grad_count = None
        self.metrics_path = self.out_dir / "metrics.jsonl"
        self.ckpt_path = self.out_dir / "avatar.gavc"

    def _reset_stats(self) -> None:
        n = self.scene.bank.n_gaussians
        dtype = self.scene.bank.positions.dtype
        self.grad_accum = torch.zeros(n, dtype=dtype)
        self.grad_count = torch.zeros(n, dtype=dtype)

    def _sample_view(self, it: int):
        """(camera, reference image or None) for this iteration."""
        if self.refs:
            i = int(torch.randint(0, len(self.refs), (1,), generator=self.gen))
            return self.refs[i].camera, self.refs[i].image
        zoom = it >= self.scene.config.zoom_start
        mode = self.camera_sampler.sample_mode(self.gen, zoom)
        return self.camera_sampler.sample(self.gen, mode), None

    def _mesh_losses(self, cam: Camera, parts: dict, it: int, attrs=None) -> None:
        """Canonical-pose geometry supervision: alpha, normal-SDS, consistency."""
        scene = self.scene
        cfg = scene.config
        sdf_vals = eval_sdf(scene.sdf_field, self.tet_grid.vertices)
        mesh = marching_tets(sdf_vals, self.tet_grid)
        parts["nc"] = normal_consistency_loss(mesh)
        if mesh.is_empty:
            return
        want_normals = getattr(self.guidance, "supports_normal", False)
        normal_img, mask = rasterize_mesh(mesh, cam, need_normals=want_normals)
        rt_rest, _ = render_scene(scene, scene.rest_pose(), cam, attrs=attrs)
        parts["alpha"] = alpha_loss(mask, rt_rest.alpha)
        if want_normals:
            ctx = GuidanceContext(
                prompt=cfg.prompt, kind="normal",
                seed=cfg.seed * 1_000_003 + it,
            )
            grad = self.guidance.image_grad(normal_img.detach(), ctx)
            parts["normal_sds"] = (grad.detach() * normal_img).sum()

    def train(self, log_every: int = 50) -> TrainResult:
        from .formats.checkpoint import save_checkpoint  # avoid import cycle

        scene = self.scene
        cfg = scene.config
        scene.bank.positions.requires_grad_(True)
        scene.theta_n.requires_grad_(True)
        scene.beta.requires_grad_(True)
        self.adam = adam_groups_for_scene(scene)
        self._reset_stats()
        weights = {
            "sds": cfg.weights.sds, "pos": cfg.weights.pos, "eik": cfg.weights.eik,
            "alpha": cfg.weights.alpha, "normal_sds": cfg.weights.normal_sds,
            "nc": cfg.weights.nc,
        }
        metrics = open(self.metrics_path, "w")
        last_good = None
        try:
            for it in range(cfg.iterations):
                t0 = time.perf_counter()
                pose = self.pose_sampler.sample(it, self.gen)
                cam, ref = self._sample_view(it)
                rt, aux = render_scene(scene, pose, cam)
                if aux.splats.count and aux.splats.means.requires_grad:
                    aux.splats.means.retain_grad()

                ctx = GuidanceContext(
                    prompt=cfg.prompt, kind="rgb",
                    seed=cfg.seed * 7_919 + it, reference=ref,
                )
                try:
                    grad = self.guidance.image_grad(rt.image.detach(), ctx)
                except GuidanceError as exc:
                    self._abort(f"guidance failed at iter {it}: {exc}", last_good)
                parts = {
                    "sds": (grad.detach() * rt.image).sum(),
                    "pos": local_position_loss(scene.bank.positions),
                    "eik": eikonal_loss(
                        scene.sdf_field,
                        eikonal_points(
                            aux.attrs.canonical.detach(), cfg.eikonal_samples // 2, self.gen
                        ),
                    ),
                }
                if cfg.mesh_interval and it % cfg.mesh_interval == 0:
                    self._mesh_losses(cam, parts, it, attrs=aux.attrs)
                loss, logd = total_loss(weights, parts)
                if not math.isfinite(logd["loss_total"]) or logd["loss_total"] > LOSS_ABORT:
                    self._abort(f"divergence at iter {it}: loss {logd['loss_total']}", last_good)

                self.adam.zero_grad()
                loss.backward()
                self._accumulate_grad_stats(aux)
                self.adam.step()

                if cfg.densify_interval and (it + 1) % cfg.densify_interval == 0:
                    self._densify(aux)

                logd.update(
                    iter=it, n_gaussians=scene.bank.n_gaussians,
                    ms_frame=(time.perf_counter() - t0) * 1000,
                )
                metrics.write(json.dumps(logd) + "\n")
                if log_every and it % log_every == 0:
                    metrics.flush()
                    log.info("iter %d loss %.5f N %d", it, logd["loss_total"], scene.bank.n_gaussians)
                if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(scene, self.ckpt_path, adam=self.adam)
                    last_good = self.ckpt_path

            save_checkpoint(scene, self.ckpt_path, adam=self.adam)
            final = None
            if self.holdout:
                final = self.evaluate_holdout()
                metrics.write(json.dumps({"final_psnr": final}) + "\n")
            return TrainResult(self.ckpt_path, self.metrics_path, final)
        finally:
            metrics.close()
            scene.bank.positions.requires_grad_(False)
            scene.theta_n.requires_grad_(False)
            scene.beta.requires_grad_(False)

    def _abort(self, message: str, last_good) -> None:
        log.error(message)
        raise TrainingAborted(message, checkpoint_path=last_good)

    def _accumulate_grad_stats(self, aux) -> None:
        g = aux.splats.means.grad
        if g is None:
            return
        cfg = self.scene.config
        ndc = g * (cfg.resolution / 2)  # pixels -> NDC-scale units
        norms = ndc.norm(dim=-1)
        src = aux.splats.source_index
        self.grad_accum.index_add_(0, src, norms)
        self.grad_count.index_add_(0, src, torch.ones_like(norms))

    @torch.no_grad()
    def _densify(self, aux) -> None:
        scene = self.scene
        mean_grad = self.grad_accum / self.grad_count.clamp_min(1)
        new_bank, src, fresh = densify_prune(
            scene.bank,
            mean_grad,
            aux.attrs.opacities.detach(),
            aux.world_scales.detach(),
            generator=self.gen,
            cap=scene.config.gaussian_cap,
        )
        if new_bank is scene.bank:
            return
        scene.bank = new_bank
        scene.bank.positions.requires_grad_(True)
        self.adam.replace_param("positions", scene.bank.positions, src, fresh)
        self._reset_stats()

    @torch.no_grad()
    def evaluate_holdout(self) -> float:
        vals = []
        for view in self.holdout:
            rt, _ = render_scene(self.scene, self.scene.natural_pose(), view.camera)
            vals.append(psnr(rt.image, view.image.to(rt.image.dtype)))
        return sum(vals) / len(vals)
