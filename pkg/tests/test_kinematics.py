import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posepair.kinematics import (
    CyclicChainError,
    DanglingReferenceError,
    MalformedURDFError,
    MissingLimitError,
    ProfileError,
    RobotProfile,
    UnsupportedJointError,
    forward_kinematics,
    forward_kinematics_batch,
    link_transforms,
    load_profile,
    parse_urdf,
    sample_joint_vector,
    within_limits,
)
from posepair.rotations import rotmat_to_sixd

from .conftest import DATA
from .fk_oracle import urdf_link_frames


def _urdf(joints, links=("a", "b", "c")):
    body = "".join(f'<link name="{name}"/>' for name in links)
    return f'<robot name="t">{body}{joints}</robot>'


def _rev(name, parent, child, limit=True, extra=""):
    lim = '<limit lower="-1" upper="1"/>' if limit else ""
    return (
        f'<joint name="{name}" type="revolute"><parent link="{parent}"/><child link="{child}"/>'
        f'<axis xyz="0 0 1"/>{lim}{extra}</joint>'
    )


def test_ordering_is_depth_first_file_order(reachy):
    links = reachy.chain.links
    assert links[0] == "torso"
    # right arm listed first in the file, so its subtree precedes the left one
    assert links.index("r_tip") < links.index("l_shoulder")
    assert reachy.chain.n == 14 and reachy.chain.m == 18


def test_fixture_dims(arm):
    assert (arm.n, arm.m) == (7, 8)
    assert arm.limits.shape == (7, 2)


@pytest.mark.parametrize(
    "text, err",
    [
        ("<robot><link", MalformedURDFError),
        ("<notrobot/>", MalformedURDFError),
        (_urdf('<joint name="j" type="prismatic"><parent link="a"/><child link="b"/></joint>'), UnsupportedJointError),
        (_urdf(_rev("j", "a", "b", limit=False)), MissingLimitError),
        (_urdf(_rev("j", "a", "zz")), DanglingReferenceError),
        (_urdf(_rev("j1", "a", "b") + _rev("j2", "b", "a"), links=("a", "b")), CyclicChainError),
        (_urdf(_rev("j1", "a", "b") + _rev("j2", "c", "b")), CyclicChainError),
        (_urdf(_rev("j1", "a", "b")), DanglingReferenceError),  # c disconnected
        (_urdf(_rev("j1", "a", "b", extra='<origin xyz="0 0"/>') + _rev("j2", "b", "c")), MalformedURDFError),
    ],
)
def test_urdf_errors(text, err):
    with pytest.raises(err):
        parse_urdf(text)


def test_zero_config_arm_stacks_offsets(arm):
    R, P = forward_kinematics_batch(arm, np.zeros((1, 7)))
    assert np.allclose(P[0, 1], [0, 0, 0.10])
    assert np.allclose(P[0, 2], [0, 0, 0.25])
    assert np.allclose(R[0, 0], [1, 0, 0, 0, 1, 0])


@pytest.mark.parametrize("which", ["arm", "reachy"])
def test_fk_matches_homogeneous_oracle(which, arm, reachy):
    chain = arm if which == "arm" else reachy.chain
    name = "test_arm_7dof.urdf" if which == "arm" else "reachy_like.urdf"
    text = (DATA / name).read_text()
    rng = np.random.default_rng(1)
    lim = chain.limits
    Q = lim[:, 0] + (lim[:, 1] - lim[:, 0]) * rng.random((50, chain.n))
    rot, pos = link_transforms(chain, Q)
    for i, q in enumerate(Q):
        frames = urdf_link_frames(text, dict(zip(chain.joint_names, q)))
        for li, link in enumerate(chain.links):
            assert np.max(np.abs(frames[link][:3, :3] - rot[i, li])) < 1e-12
            assert np.max(np.abs(frames[link][:3, 3] - pos[i, li])) < 1e-12


def test_single_and_batch_fk_agree(reachy):
    q = sample_joint_vector(reachy.chain, reachy, 3)
    pose = forward_kinematics(reachy.chain, q)
    R, P = forward_kinematics_batch(reachy.chain, q[None])
    assert np.allclose(pose.R, R[0], atol=1e-14) and np.allclose(pose.P, P[0], atol=1e-14)
    with pytest.raises(ValueError):
        forward_kinematics(reachy.chain, q[:-1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fk_orientations_are_rotations(seed):
    from posepair.kinematics import load_urdf

    chain = load_urdf(DATA / "reachy_like.urdf")
    q = sample_joint_vector(chain, None, seed)
    assert within_limits(chain, q)
    rot, _ = link_transforms(chain, q[None])
    rotmat_to_sixd(rot)  # validates orthonormality and det


def test_revolute_invariance_of_joint_origin(arm):
    # rotating a joint never moves its own child link origin
    q0 = np.zeros(7)
    q1 = q0.copy()
    q1[3] = 0.9
    _, P0 = forward_kinematics_batch(arm, q0[None])
    _, P1 = forward_kinematics_batch(arm, q1[None])
    assert np.allclose(P0[0, :5], P1[0, :5], atol=1e-14)


def test_profile_validation(reachy, tmp_path):
    with pytest.raises(ProfileError):
        RobotProfile(reachy.chain, ["nope"], [])
    with pytest.raises(ProfileError):
        RobotProfile(reachy.chain, [], [], sampling_ranges=reachy.chain.limits * 2)
    bad = tmp_path / "p.json"
    bad.write_text("{not json")
    with pytest.raises(ProfileError):
        load_profile(bad)


def test_sampling_is_seeded(reachy):
    a = sample_joint_vector(reachy.chain, reachy, 7)
    assert np.array_equal(a, sample_joint_vector(reachy.chain, reachy, 7))
    assert not np.array_equal(a, sample_joint_vector(reachy.chain, reachy, 8))
