"""Command-line surface.

Commands: fit, animate, extract-mesh, bench, bake, make-template, render.
Exit codes: 0 success, 2 usage/config error, 3 training abort, 4 empty result.
GAVATAR_THREADS caps the worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .errors import CheckpointError, ParameterError, TrainingAborted

log = logging.getLogger("gavatar")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORT = 3
EXIT_EMPTY = 4


def _apply_threads() -> None:
    threads = os.environ.get("GAVATAR_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))


def _camera_from_args(args, default_res: int = 512):
    from .formats.views import camera_from_json
    from .camera import look_at

    if getattr(args, "camera", None):
        return camera_from_json(json.loads(Path(args.camera).read_text()))
    import math

    az = math.radians(args.azimuth)
    el = math.radians(args.elevation)
    eye = (
        args.radius * math.cos(el) * math.sin(az),
        args.radius * math.sin(el) - 0.1,
        args.radius * math.cos(el) * math.cos(az),
    )
    res = getattr(args, "resolution", default_res)
    return look_at(eye, (0.0, -0.1, 0.0), res, res, fov_y_deg=args.fov)


def _add_camera_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--camera", help="camera JSON file (overrides orbit args)")
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=10.0)
    p.add_argument("--radius", type=float, default=3.5)
    p.add_argument("--fov", type=float, default=45.0)
    p.add_argument("--resolution", type=int, default=512)


def cmd_make_template(args) -> int:
    from .capsule import make_skeleton, make_template
    from .formats.template import save_template

    template = make_template()
    skeleton = make_skeleton()
    save_template(template, skeleton, args.out)
    print(f"template: {template.n_vertices} vertices, "
          f"{template.triangles.shape[0]} triangles, {skeleton.n_joints} joints -> {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .config import load_config
    from .guidance import MockSdsServer, PhotometricGuidance, RemoteSdsClient
    from .scene import build_scene, pretrain_scene
    from .training import Trainer
    from .formats.poseseq import load_pose_sequence
    from .formats.views import load_views

    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.iterations is not None:
        config.iterations = args.iterations
        config.natural_pose_iters = min(config.natural_pose_iters, args.iterations)
        config.zoom_start = min(config.zoom_start, args.iterations)
    if args.prompt:
        config.prompt = args.prompt

    refs, holdout = [], []
    if args.refs:
        refs, holdout = load_views(args.refs)

    pose_bank = []
    if args.poses:
        pose_bank = load_pose_sequence(args.poses).frames

    mock_server = None
    try:
        if args.guidance == "photometric":
            if not refs:
                raise ParameterError("photometric guidance requires --refs")
            guidance = PhotometricGuidance()
        elif args.guidance == "remote":
            if not args.endpoint:
                raise ParameterError("remote guidance requires --endpoint")
            if not config.prompt:
                raise ParameterError("remote guidance requires --prompt")
            guidance = RemoteSdsClient(args.endpoint)
        else:  # mock: in-process seeded server behind the remote client
            mock_server = MockSdsServer()
            mock_server.__enter__()
            config.prompt = config.prompt or "mock avatar"
            guidance = RemoteSdsClient(mock_server.endpoint)

        scene = build_scene(config)
        if config.pretrain_steps > 0:
            log.info("pretraining fields (%s target)", args.pretrain_target)
            pretrain_scene(scene, target=args.pretrain_target)
        trainer = Trainer(
            scene, guidance, args.out,
            ref_views=refs, holdout_views=holdout, pose_bank=pose_bank,
        )
        result = trainer.train()
        if result.final_psnr is not None:
            print(f"final PSNR: {result.final_psnr:.2f} dB")
        print(f"checkpoint: {result.checkpoint}")
        print(f"metrics: {result.metrics}")
        return EXIT_OK
    finally:
        if mock_server is not None:
            mock_server.__exit__(None, None, None)


def cmd_render(args) -> int:
    import numpy as np

    from .formats.checkpoint import load_checkpoint
    from .formats.png import save_png
    from .scene import render_scene

    scene = load_checkpoint(args.checkpoint)
    cam = _camera_from_args(args)
    pose = scene.natural_pose() if args.pose == "natural" else scene.rest_pose()
    with torch.no_grad():
        rt, _ = render_scene(scene, pose, cam)
    save_png(rt.image, args.out)
    if args.dump_linear:
        np.save(args.dump_linear, rt.image.numpy())
    print(f"rendered {cam.width}x{cam.height} -> {args.out}")
    return EXIT_OK


def cmd_bake(args) -> int:
    from .formats.checkpoint import load_checkpoint, save_checkpoint
    from .scene import bake

    scene = load_checkpoint(args.checkpoint)
    bake(scene)
    save_checkpoint(scene, args.out)
    print(f"baked {scene.bank.n_gaussians} Gaussians -> {args.out}")
    return EXIT_OK


def cmd_animate(args) -> int:
    from .body import BodyParams
    from .bench import render_frame_timed
    from .formats.checkpoint import load_checkpoint
    from .formats.png import save_png
    from .formats.poseseq import load_pose_sequence
    from .scene import bake

    scene = load_checkpoint(args.checkpoint)
    seq = load_pose_sequence(args.poses)
    if seq.frames[0].shape[0] != scene.skeleton.n_joints:
        print(
            f"error: pose sequence has {seq.frames[0].shape[0]} joints, "
            f"checkpoint skeleton has {scene.skeleton.n_joints}",
            file=sys.stderr,
        )
        return EXIT_USAGE
    if not scene.bank.baked:
        log.info("checkpoint not baked; baking for playback")
        bake(scene)
    cam = _camera_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = []
    for i, frame in enumerate(seq.frames):
        pose = BodyParams(pose=frame, shape=scene.beta)
        rt, timing = render_frame_timed(scene, pose, cam)
        save_png(rt.image, out / f"frame_{i:05d}.png")
        timings.append(timing.as_dict())
    report = {
        "frames": len(timings),
        "per_frame": timings,
        "mean": {
            k: sum(t[k] for t in timings) / len(timings)
            for k in ("lbs_ms", "primitives_ms", "transform_ms", "raster_ms", "total_ms")
        },
    }
    (out / "timing.json").write_text(json.dumps(report, indent=1))
    print(f"{len(timings)} frames -> {out} "
          f"(mean total {report['mean']['total_ms']:.1f} ms)")
    return EXIT_OK


def cmd_extract_mesh(args) -> int:
    from .fields import eval_sdf
    from .formats.checkpoint import load_checkpoint
    from .formats.meshio import save_obj, save_ply
    from .tetmesh import TetGrid, marching_tets
    from .texture import bake_texture

    scene = load_checkpoint(args.checkpoint)
    grid = TetGrid.build(args.resolution)
    with torch.no_grad():
        sdf = eval_sdf(scene.sdf_field, grid.vertices)
        mesh = marching_tets(sdf, grid)
        if mesh.is_empty:
            print(
                "error: empty isosurface; sdf stats "
                f"min {float(sdf.min()):.4f} max {float(sdf.max()):.4f} "
                f"mean {float(sdf.mean()):.4f}",
                file=sys.stderr,
            )
            return EXIT_EMPTY
        bake_texture(mesh, scene.attr_field, atlas_size=args.atlas)
    save_obj(mesh, args.out)
    if args.ply:
        save_ply(mesh, args.ply)
    print(f"mesh: {mesh.vertices.shape[0]} vertices, {mesh.faces.shape[0]} faces -> {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    import psutil

    from .bench import bench_row
    from .formats.checkpoint import load_checkpoint

    load_checkpoint(args.checkpoint)  # validates the input
    counts = [int(x) for x in args.gaussians.split(",")]
    resolutions = [int(x) for x in args.resolutions.split(",")]
    rows = [(n, r) for n in counts for r in resolutions]
    if args.paper_row:
        if psutil.virtual_memory().available > 6 * 2**30:
            rows.append((2_500_000, 1024))
        else:
            log.warning("skipping 2.5M/1024 row: insufficient memory")
    out_rows = []
    for n, r in rows:
        row = bench_row(n, r, r, seed=args.seed)
        out_rows.append(row)
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["N", "W", "H", "ms_raster", "ms_total", "fps"])
        writer.writeheader()
        writer.writerows(out_rows)
    print(f"report -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gavatar", description=__doc__)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-template", help="generate the capsule-person asset")
    p.add_argument("out")
    p.set_defaults(fn=cmd_make_template)

    p = sub.add_parser("fit", help="optimize an avatar")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--guidance", choices=("photometric", "remote", "mock"),
                   default="photometric")
    p.add_argument("--refs", help="reference-view directory (photometric)")
    p.add_argument("--endpoint", help="SDS service URL (remote)")
    p.add_argument("--prompt", default="")
    p.add_argument("--poses", help="animation pose-sequence JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--pretrain-target", choices=("body", "sphere"), default="body")
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("render", help="render a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--pose", choices=("natural", "rest"), default="natural")
    p.add_argument("--dump-linear", help="also save the linear image as NPY")
    _add_camera_args(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("bake", help="freeze field attributes into the bank")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bake)

    p = sub.add_parser("animate", help="play a pose sequence to PNG frames")
    p.add_argument("checkpoint")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    _add_camera_args(p)
    p.set_defaults(fn=cmd_animate)

    p = sub.add_parser("extract-mesh", help="marching-tets surface + texture")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--ply")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--atlas", type=int, default=0)
    p.set_defaults(fn=cmd_extract_mesh)

    p = sub.add_parser("bench", help="rasterizer throughput sweep")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--gaussians", default="100000,200000")
    p.add_argument("--resolutions", default="512")
    p.add_argument("--paper-row", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    _apply_threads()
    try:
        return args.fn(args)
    except (ParameterError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        if exc.checkpoint_path:
            print(f"last good checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
