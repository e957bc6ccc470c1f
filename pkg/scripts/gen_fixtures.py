"""Regenerate the shared protocol golden fixtures and the training trace.

Run from the repo root: python3 scripts/gen_fixtures.py
"""

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from gavatar import protocol  # noqa: E402


def gen_protocol_fixtures() -> None:
    out = ROOT / "fixtures" / "sds_protocol"
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "prompt": "golden capsule person",
        "seed": 20240607,
        "image_seed": 7,
        "t_min": 0.02,
        "t_max": 0.98,
        "height": 8,
        "width": 8,
        "errors": {
            "bad_magic": 400,
            "oversized": 422,
            "model_failure": 500,
        },
    }
    rng = np.random.default_rng(meta["image_seed"])
    image = rng.random((meta["height"], meta["width"], 3), np.float32)
    req = protocol.SdsRequest(
        prompt=meta["prompt"], kind=protocol.KIND_RGB, seed=meta["seed"],
        t_min=meta["t_min"], t_max=meta["t_max"], image=image,
    )
    req_bytes = protocol.encode_request(req)
    grad = protocol.mock_gradient(protocol.decode_request(req_bytes))
    resp_bytes = protocol.encode_response(grad)
    (out / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    (out / "request_8x8.bin").write_bytes(req_bytes)
    (out / "response_8x8.bin").write_bytes(resp_bytes)
    print(f"protocol fixtures -> {out} ({len(req_bytes)} + {len(resp_bytes)} bytes)")


def gen_golden_trace() -> None:
    import torch

    torch.set_num_threads(2)
    from gavatar.guidance import PhotometricGuidance
    from gavatar.scene import build_scene, render_scene
    from gavatar.synthetic import desk_config, paint_scene
    from gavatar.training import CameraSampler, ReferenceView, Trainer
    import copy
    import tempfile

    cfg = desk_config(
        grid_n=8, per_primitive=8, resolution=128, tet_resolution=8,
        iterations=10, natural_pose_iters=10, zoom_start=10, mesh_interval=5,
        eikonal_samples=256, checkpoint_every=0, pretrain_steps=0, seed=0,
    )
    torch.manual_seed(cfg.seed)
    scene = build_scene(cfg)
    target = copy.deepcopy(scene)
    paint_scene(target)
    gen = torch.Generator().manual_seed(123)
    sampler = CameraSampler(resolution=128)
    refs = []
    with torch.no_grad():
        for _ in range(2):
            cam = sampler.sample(gen)
            rt, _ = render_scene(target, target.rest_pose(), cam)
            refs.append(ReferenceView(camera=cam, image=rt.image))
    with tempfile.TemporaryDirectory() as tmp:
        trainer = Trainer(scene, PhotometricGuidance(), tmp, ref_views=refs)
        result = trainer.train()
        lines = []
        for line in Path(result.metrics).read_text().splitlines():
            d = json.loads(line)
            d.pop("ms_frame", None)
            if "iter" in d:
                lines.append(d)
    out = ROOT / "tests" / "fixtures"
    out.mkdir(parents=True, exist_ok=True)
    (out / "golden_trace.json").write_text(json.dumps(lines, indent=1) + "\n")
    print(f"golden trace -> {out / 'golden_trace.json'} ({len(lines)} steps)")


if __name__ == "__main__":
    gen_protocol_fixtures()
    gen_golden_trace()
