"""Reference-view folders for photometric fitting: PNG preview + float NPY
payload + JSON camera. The NPY holds the exact linear image; the PNG is for
eyeballing."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..camera import Camera, look_at
from ..errors import ParameterError
from ..training import ReferenceView
from .png import load_png, save_png


def camera_to_json(cam: Camera, holdout: bool = False) -> dict:
    return {
        "rot": cam.rot.tolist(),
        "trans": cam.trans.tolist(),
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "holdout": holdout,
    }


def camera_from_json(doc: dict) -> Camera:
    if "eye" in doc:
        return look_at(
            doc["eye"], doc.get("target", (0.0, 0.0, 0.0)),
            doc["width"], doc["height"], fov_y_deg=doc.get("fov_y_deg", 45.0),
        )
    return Camera(
        rot=torch.tensor(doc["rot"], dtype=torch.float32),
        trans=torch.tensor(doc["trans"], dtype=torch.float32),
        fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
        width=doc["width"], height=doc["height"],
    )


def save_view(directory: str | Path, name: str, cam: Camera, image: torch.Tensor,
              holdout: bool = False) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{name}.json").write_text(
        json.dumps(camera_to_json(cam, holdout), indent=1)
    )
    np.save(directory / f"{name}.npy", image.detach().cpu().numpy().astype(np.float32))
    save_png(image, directory / f"{name}.png")


def load_views(directory: str | Path) -> tuple[list[ReferenceView], list[ReferenceView]]:
    """-> (training views, holdout views)."""
    directory = Path(directory)
    train, holdout = [], []
    for meta in sorted(directory.glob("*.json")):
        doc = json.loads(meta.read_text())
        cam = camera_from_json(doc)
        npy = meta.with_suffix(".npy")
        png = meta.with_suffix(".png")
        if npy.exists():
            img = torch.from_numpy(np.load(npy))
        elif png.exists():
            img = load_png(png)
        else:
            raise ParameterError(f"view {meta.stem} has no image payload")
        view = ReferenceView(camera=cam, image=img)
        (holdout if doc.get("holdout") else train).append(view)
    if not train:
        raise ParameterError(f"no reference views found in {directory}")
    return train, holdout
