"""Run the desk-scale self-reconstruction exactly as the test fixture does.

Usage: python3 scripts/run_e2e.py <out_dir>
"""

import json
import sys
import time
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))
torch.set_num_threads(2)

from gavatar.cli import main  # noqa: E402
from gavatar.config import save_config  # noqa: E402
from gavatar.formats.views import save_view  # noqa: E402
from gavatar.scene import render_scene  # noqa: E402
from gavatar.synthetic import desk_config, painted_target_scene  # noqa: E402
from gavatar.training import CameraSampler  # noqa: E402


def run(root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
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
    (root / "result.json").write_text(json.dumps({"exit_code": code, "elapsed_s": elapsed}))
    print(f"exit {code}, {elapsed/60:.1f} min")


if __name__ == "__main__":
    run(Path(sys.argv[1]))
