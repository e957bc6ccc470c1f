import json
import struct

import numpy as np
import pytest
import torch

from gavatar.bank import init_bank
from gavatar.capsule import make_skeleton, make_template
from gavatar.config import TrainConfig, config_from_json, config_to_json, load_config, save_config
from gavatar.errors import CheckpointError, ParameterError
from gavatar.formats.checkpoint import load_checkpoint, save_checkpoint
from gavatar.formats.meshio import load_obj, load_ply, save_obj, save_ply
from gavatar.formats.png import load_png, save_png
from gavatar.formats.poseseq import PoseSequence, load_pose_sequence, save_pose_sequence
from gavatar.formats.template import load_template, save_template
from gavatar.scene import build_scene
from gavatar.tetmesh import TetGrid, TriMesh, compute_vertex_normals, marching_tets
from conftest import tiny_config


@pytest.fixture(scope="module")
def scene():
    return build_scene(tiny_config(seed=3))


def test_checkpoint_roundtrip_byte_identical(scene, tmp_path):
    p1 = tmp_path / "a.gavc"
    p2 = tmp_path / "b.gavc"
    save_checkpoint(scene, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_restores_bank_bit_exact(scene, tmp_path):
    path = tmp_path / "c.gavc"
    save_checkpoint(scene, path)
    loaded = load_checkpoint(path)
    for name in ("positions", "scale_mult", "offsets", "counts", "sh", "rotations", "scales", "opacities"):
        assert torch.equal(getattr(loaded.bank, name), getattr(scene.bank, name)), name
    for (k1, v1), (k2, v2) in zip(
        scene.attr_field.state_dict().items(), loaded.attr_field.state_dict().items()
    ):
        assert k1 == k2 and torch.equal(v1, v2)
    assert torch.equal(loaded.kernel.raw, scene.kernel.raw)
    assert torch.equal(loaded.theta_n, scene.theta_n)


def test_checkpoint_truncation_detected(scene, tmp_path):
    path = tmp_path / "t.gavc"
    save_checkpoint(scene, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 100])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_version(scene, tmp_path):
    path = tmp_path / "v.gavc"
    save_checkpoint(scene, path)
    data = bytearray(path.read_bytes())
    struct.pack_into("<I", data, 4, 0)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_checksum_mismatch(scene, tmp_path):
    path = tmp_path / "crc.gavc"
    save_checkpoint(scene, path)
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_template_asset_roundtrip(tmp_path):
    template = make_template()
    skeleton = make_skeleton()
    path = tmp_path / "person.gavt"
    save_template(template, skeleton, path)
    t2, s2 = load_template(path)
    assert torch.equal(t2.vertices, template.vertices)
    assert torch.equal(t2.triangles, template.triangles)
    assert torch.equal(t2.skin_w, template.skin_w)
    assert torch.equal(t2.uv, template.uv)
    assert s2.names == skeleton.names
    assert torch.equal(s2.parents, skeleton.parents)


def test_pose_sequence_roundtrip_and_validation(tmp_path):
    seq = PoseSequence(fps=24.0, frames=[torch.zeros(24, 3), torch.full((24, 3), 0.1)])
    path = tmp_path / "seq.json"
    save_pose_sequence(seq, path)
    loaded = load_pose_sequence(path)
    assert loaded.fps == 24.0 and loaded.n_frames == 2
    assert torch.allclose(loaded.frames[1], seq.frames[1])

    bad = json.loads(path.read_text())
    bad["frames"][1] = bad["frames"][1][:-1]  # joint-count mismatch
    path.write_text(json.dumps(bad))
    with pytest.raises(ParameterError):
        load_pose_sequence(path)


@pytest.fixture(scope="module")
def sphere_trimesh():
    grid = TetGrid.build(16, box=(-1.0, 1.0))
    mesh = marching_tets(grid.vertices.norm(dim=-1) - 0.6, grid)
    mesh.vertex_colors = (mesh.vertices * 0.5 + 0.5).clamp(0, 1)
    return mesh


def test_obj_roundtrip_precision(sphere_trimesh, tmp_path):
    path = tmp_path / "m.obj"
    save_obj(sphere_trimesh, path)
    verts, faces = load_obj(path)
    rel = (verts - sphere_trimesh.vertices).abs() / sphere_trimesh.vertices.abs().clamp_min(1e-3)
    assert float(rel.max()) < 1e-6
    assert torch.equal(faces, sphere_trimesh.faces)


def test_ply_roundtrip_with_colors(sphere_trimesh, tmp_path):
    path = tmp_path / "m.ply"
    save_ply(sphere_trimesh, path)
    verts, faces, colors = load_ply(path)
    assert (verts - sphere_trimesh.vertices).abs().max() < 1e-6
    assert torch.equal(faces, sphere_trimesh.faces)
    expected = (sphere_trimesh.vertex_colors * 255).round().to(torch.uint8)
    assert torch.equal(colors, expected)


def test_png_srgb_roundtrip(tmp_path):
    gen = torch.Generator().manual_seed(0)
    img = torch.rand(16, 16, 3, generator=gen)
    path = tmp_path / "img.png"
    save_png(img, path)
    back = load_png(path)
    assert back.shape == img.shape
    assert (back - img).abs().max() < 0.01  # 8-bit quantization in sRGB


def test_config_json_roundtrip(tmp_path):
    cfg = TrainConfig(iterations=123, natural_pose_iters=50, zoom_start=60, grid_n=4)
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    loaded = load_config(path)
    assert loaded == cfg
    assert config_from_json(config_to_json(cfg)) == cfg


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"iterations": 10, "bogus_field": 1}')
    with pytest.raises(ParameterError, match="bogus_field"):
        load_config(path)
