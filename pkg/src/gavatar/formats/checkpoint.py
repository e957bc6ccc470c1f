"""Checkpoint container: bank arrays, field/corrective parameters, kernel,
body parameters, optimizer state, config snapshot, and the template asset.

Self-contained: loading needs no other files. Round-trips byte-identically.
"""

from __future__ import annotations

from pathlib import Path

import torch

from ..bank import GaussianBank
from ..config import config_from_json, config_to_json
from ..errors import CheckpointError
from ..fields import AttributeField, OpacityKernel, SdfField
from ..rig import CorrectiveNets
from ..scene import Scene
from .arrays import decode_array, encode_array
from .container import read_container, write_container
from .template import template_from_bytes, template_to_bytes

MAGIC = b"GAVC"
VERSION = 1

_BANK_FIELDS = ("positions", "scale_mult", "offsets", "counts",
                "sh", "rotations", "scales", "opacities")


def save_checkpoint(scene: Scene, path: str | Path, adam=None) -> None:
    sections: dict[str, bytes] = {
        "config": config_to_json(scene.config).encode(),
        "template": template_to_bytes(scene.template, scene.skeleton),
        "bank/baked": bytes([1 if scene.bank.baked else 0]),
        "body/theta_n": encode_array(scene.theta_n),
        "body/beta": encode_array(scene.beta),
        "kernel/raw": encode_array(scene.kernel.raw),
    }
    for name in _BANK_FIELDS:
        sections[f"bank/{name}"] = encode_array(getattr(scene.bank, name))
    for prefix, module in (
        ("fields/attr", scene.attr_field),
        ("fields/sdf", scene.sdf_field),
        ("correctives", scene.correctives),
    ):
        for key, tensor in module.state_dict().items():
            sections[f"{prefix}/{key}"] = encode_array(tensor)
    if adam is not None:
        for gname, g in adam.groups.items():
            sections[f"adam/{gname}/step"] = encode_array(torch.tensor(g["step"]))
            for i, (m, v) in enumerate(zip(g["m"], g["v"])):
                sections[f"adam/{gname}/m{i}"] = encode_array(m)
                sections[f"adam/{gname}/v{i}"] = encode_array(v)
    write_container(path, MAGIC, VERSION, sections)


def load_checkpoint(path: str | Path) -> Scene:
    sections = read_container(path, MAGIC, VERSION)
    try:
        config = config_from_json(sections["config"].decode())
        template, skeleton = template_from_bytes(sections["template"])
        bank_arrays = {name: decode_array(sections[f"bank/{name}"]) for name in _BANK_FIELDS}
    except KeyError as exc:
        raise CheckpointError(f"missing checkpoint section {exc}") from exc

    bank = GaussianBank(**bank_arrays, baked=bool(sections["bank/baked"][0]))
    n_prims = config.grid_n * config.grid_n
    attr_field = AttributeField(n_levels=config.attr_levels, log2_table=config.hash_log2_table)
    sdf_field = SdfField(n_levels=config.sdf_levels, log2_table=config.hash_log2_table)
    correctives = CorrectiveNets(skeleton.n_joints, n_prims)
    kernel = OpacityKernel()

    def load_module(prefix, module):
        state = {}
        for key in module.state_dict():
            blob = sections.get(f"{prefix}/{key}")
            if blob is None:
                raise CheckpointError(f"missing checkpoint section {prefix}/{key}")
            state[key] = decode_array(blob)
        module.load_state_dict(state)

    load_module("fields/attr", attr_field)
    load_module("fields/sdf", sdf_field)
    load_module("correctives", correctives)
    with torch.no_grad():
        kernel.raw.copy_(decode_array(sections["kernel/raw"]))

    return Scene(
        template=template,
        skeleton=skeleton,
        grid_n=config.grid_n,
        correctives=correctives,
        bank=bank,
        attr_field=attr_field,
        sdf_field=sdf_field,
        kernel=kernel,
        theta_n=decode_array(sections["body/theta_n"]),
        beta=decode_array(sections["body/beta"]),
        config=config,
    )
