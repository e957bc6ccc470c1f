import math

import pytest
import torch

from gavatar.body import BodyParams, compute_anchors
from gavatar.errors import ParameterError
from gavatar.rig import CorrectiveNets, generate_primitives, posed_primitives
from gavatar.transforms import axis_angle_to_quat, quat_mul


@pytest.fixture(scope="module")
def anchors(template):
    return compute_anchors(template, 8)


def test_zero_correctives_identity(anchors, skeleton):
    nets = CorrectiveNets(skeleton.n_joints, anchors.count)
    prims = generate_primitives(anchors, nets, BodyParams.rest(skeleton.n_joints))
    assert torch.equal(prims.positions, anchors.positions)
    assert torch.equal(prims.rotations, anchors.rotations)
    assert torch.equal(prims.scales, anchors.scales)


def test_rotation_corrective_composes_left(anchors, skeleton):
    nets = CorrectiveNets(skeleton.n_joints, anchors.count)
    qz90 = axis_angle_to_quat(torch.tensor([0.0, 0.0, math.pi / 2]))
    with torch.no_grad():
        # bias so normalize(identity + raw) equals the target quaternion
        raw = qz90 - torch.tensor([1.0, 0.0, 0.0, 0.0])
        nets.head_rot.bias.reshape(anchors.count, 4)[0] = raw
    prims = generate_primitives(anchors, nets, BodyParams.rest(skeleton.n_joints))
    expected = quat_mul(qz90.unsqueeze(0), anchors.rotations[0:1])
    assert (prims.rotations[0] - expected[0]).abs().max() < 1e-6


def test_scale_corrective_clamped_to_floor(anchors, skeleton):
    nets = CorrectiveNets(skeleton.n_joints, anchors.count)
    with torch.no_grad():
        nets.head_scale.bias.reshape(anchors.count, 3)[0, 0] = -10.0
    prims = generate_primitives(anchors, nets, BodyParams.rest(skeleton.n_joints))
    assert float(prims.scales[0, 0].detach()) == pytest.approx(1e-4)
    assert (prims.scales > 0).all()


def test_nonfinite_corrective_raises(anchors, skeleton):
    nets = CorrectiveNets(skeleton.n_joints, anchors.count)
    with torch.no_grad():
        nets.head_pos.bias[0] = float("nan")
    with pytest.raises(ParameterError):
        generate_primitives(anchors, nets, BodyParams.rest(skeleton.n_joints))


def test_count_mismatch_raises(anchors, skeleton):
    nets = CorrectiveNets(skeleton.n_joints, anchors.count + 1)
    with pytest.raises(ParameterError):
        generate_primitives(anchors, nets, BodyParams.rest(skeleton.n_joints))


def test_unit_quaternions_after_composition(anchors, skeleton):
    nets = CorrectiveNets(skeleton.n_joints, anchors.count)
    with torch.no_grad():
        nets.head_rot.bias.normal_(std=0.3)
    prims = generate_primitives(anchors, nets, BodyParams.rest(skeleton.n_joints))
    assert ((prims.rotations.norm(dim=-1) - 1).abs() < 1e-6).all()


def test_primitives_track_posed_surface_with_zero_correctives(template, skeleton):
    nets = CorrectiveNets(skeleton.n_joints, 64)
    pose = BodyParams.rest(skeleton.n_joints)
    pose.pose[skeleton.names.index("r_elbow")] = torch.tensor([0.5, 0.2, 0.0])
    prims = posed_primitives(template, skeleton, 8, nets, pose)
    from gavatar.body import skin_mesh

    posed = skin_mesh(template, skeleton, pose)
    anchors = compute_anchors(posed, 8)
    assert (prims.positions - anchors.positions).abs().max() == 0


def test_deterministic(template, skeleton):
    torch.manual_seed(7)
    nets = CorrectiveNets(skeleton.n_joints, 64)
    pose = BodyParams.rest(skeleton.n_joints)
    pose.pose[3, 0] = 0.2
    a = posed_primitives(template, skeleton, 8, nets, pose)
    b = posed_primitives(template, skeleton, 8, nets, pose)
    assert torch.equal(a.positions, b.positions)
    assert torch.equal(a.rotations, b.rotations)
