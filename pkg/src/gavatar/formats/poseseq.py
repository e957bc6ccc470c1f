"""Pose sequences: JSON with per-frame axis-angle joint rotations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import Tensor

from ..errors import ParameterError


@dataclass
class PoseSequence:
    fps: float
    frames: list[Tensor]  # each (J, 3) axis-angle
    root_translation: list[Tensor] = field(default_factory=list)  # each (3,)

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def load_pose_sequence(path: str | Path) -> PoseSequence:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParameterError(f"cannot read pose sequence {path}: {exc}") from exc
    frames_raw = data.get("frames")
    if not frames_raw:
        raise ParameterError("pose sequence has no frames")
    j = len(frames_raw[0])
    frames = []
    for i, fr in enumerate(frames_raw):
        if len(fr) != j:
            raise ParameterError(f"frame {i} has {len(fr)} joints, expected {j}")
        t = torch.tensor(fr, dtype=torch.float32)
        if not torch.isfinite(t).all():
            raise ParameterError(f"frame {i} contains non-finite values")
        frames.append(t)
    roots = [torch.tensor(r, dtype=torch.float32) for r in data.get("root_translation", [])]
    fps = float(data.get("fps", 30.0))
    if not math.isfinite(fps) or fps <= 0:
        raise ParameterError("fps must be a positive number")
    return PoseSequence(fps=fps, frames=frames, root_translation=roots)


def save_pose_sequence(seq: PoseSequence, path: str | Path) -> None:
    doc = {
        "fps": seq.fps,
        "frames": [f.tolist() for f in seq.frames],
    }
    if seq.root_translation:
        doc["root_translation"] = [r.tolist() for r in seq.root_translation]
    Path(path).write_text(json.dumps(doc) + "\n")
