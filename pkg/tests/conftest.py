import json
import sys
import time
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(2)

from gavatar.capsule import make_skeleton, make_template
from gavatar.scene import build_scene, pretrain_scene
from gavatar.synthetic import desk_config


@pytest.fixture(scope="session")
def template():
    return make_template()


@pytest.fixture(scope="session")
def skeleton():
    return make_skeleton()


def tiny_config(**overrides):
    """Smallest config that still exercises every subsystem."""
    values = dict(
        grid_n=8, per_primitive=8, resolution=128, tet_resolution=16,
        iterations=10, natural_pose_iters=10, zoom_start=10, mesh_interval=5,
        eikonal_samples=256, checkpoint_every=0, pretrain_steps=3000,
    )
    values.update(overrides)
    return desk_config(**values)


@pytest.fixture(scope="session")
def sphere_scene():
    """Small scene with fields pretrained against the 0.9 m sphere shell."""
    scene = build_scene(tiny_config())
    pretrain_scene(scene, target="sphere")
    return scene


@pytest.fixture(scope="session")
def body_scene():
    """Small scene pretrained against the capsule-body shell."""
    scene = build_scene(tiny_config(seed=1))
    pretrain_scene(scene, target="body")
    return scene


@pytest.fixture(scope="session")
def e2e_fit(tmp_path_factory):
    """The desk-scale photometric self-reconstruction, run once via the CLI.

    Returns a dict with paths, the elapsed fit time, and final metrics.
    GAVATAR_E2E_CACHE can point at a directory to reuse a finished run
    (developer convenience; the cached artifacts come from this same path).
    """
    import os

    from gavatar.cli import main
    from gavatar.config import save_config
    from gavatar.formats.views import save_view
    from gavatar.scene import render_scene
    from gavatar.synthetic import painted_target_scene
    from gavatar.training import CameraSampler

    cache = os.environ.get("GAVATAR_E2E_CACHE")
    if cache and (Path(cache) / "result.json").exists():
        result = json.loads((Path(cache) / "result.json").read_text())
        out_dir = Path(cache) / "fit"
        lines = [json.loads(l) for l in (out_dir / "metrics.jsonl").read_text().splitlines()]
        return {
            "exit_code": result["exit_code"],
            "elapsed_s": result["elapsed_s"],
            "out_dir": out_dir,
            "views_dir": Path(cache) / "views",
            "config_path": Path(cache) / "desk.json",
            "checkpoint": out_dir / "avatar.gavc",
            "metrics": lines,
            "final_psnr": lines[-1].get("final_psnr"),
            "target_scene": None,
        }

    root = tmp_path_factory.mktemp("e2e")
    config = desk_config()
    target = painted_target_scene(config)

    views_dir = root / "views"
    sampler = CameraSampler(resolution=config.resolution)
    gen = torch.Generator().manual_seed(2024)
    with torch.no_grad():
        for i in range(16):
            cam = sampler.sample(gen)
            rt, _ = render_scene(target, target.rest_pose(), cam)
            save_view(views_dir, f"view_{i:02d}", cam, rt.image, holdout=i >= 12)

    cfg_path = root / "desk.json"
    save_config(config, cfg_path)
    out_dir = root / "fit"
    t0 = time.perf_counter()
    code = main([
        "fit", "--config", str(cfg_path), "--refs", str(views_dir),
        "--guidance", "photometric", "--out", str(out_dir),
    ])
    elapsed = time.perf_counter() - t0
    lines = [json.loads(l) for l in (out_dir / "metrics.jsonl").read_text().splitlines()]
    return {
        "exit_code": code,
        "elapsed_s": elapsed,
        "out_dir": out_dir,
        "views_dir": views_dir,
        "config_path": cfg_path,
        "checkpoint": out_dir / "avatar.gavc",
        "metrics": lines,
        "final_psnr": lines[-1].get("final_psnr"),
        "target_scene": target,
    }
