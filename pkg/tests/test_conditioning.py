import numpy as np
import pytest
import torch

from avatarnerf.conditioning import (
    DuplicateIdentityError,
    IdentityTable,
    Skeleton,
    axis_angle_from_matrix,
    build_body_pose,
    build_expression,
    default_skeleton,
    flatten_hand_pose,
    forward_kinematics,
    posed_joints,
    rodrigues,
    unflatten_hand_pose,
)

torch.set_default_dtype(torch.float64)


def matrix_exp_series(aa, terms=30):
    """Oracle: truncated matrix exponential of the skew matrix of aa."""
    k = np.zeros((3, 3))
    k[0, 1], k[0, 2] = -aa[2], aa[1]
    k[1, 0], k[1, 2] = aa[2], -aa[0]
    k[2, 0], k[2, 1] = -aa[1], aa[0]
    out = np.eye(3)
    term = np.eye(3)
    for n in range(1, terms):
        term = term @ k / n
        out = out + term
    return out


class TestRodrigues:
    def test_zero_rotation_is_identity(self):
        r = rodrigues(torch.zeros(3))
        assert torch.allclose(r, torch.eye(3), atol=0.0)

    def test_quarter_turn_about_z(self):
        r = rodrigues(torch.tensor([0.0, 0.0, np.pi / 2]))
        rotated = r @ torch.tensor([1.0, 0.0, 0.0])
        assert torch.allclose(rotated, torch.tensor([0.0, 1.0, 0.0]), atol=1e-12)

    def test_matches_matrix_exponential_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            aa = rng.normal(size=3)
            aa = aa / np.linalg.norm(aa) * rng.uniform(0.0, 2 * np.pi - 1e-6)
            r = rodrigues(torch.as_tensor(aa)).numpy()
            assert np.abs(r - matrix_exp_series(aa, terms=40)).max() < 1e-9

    def test_orthonormality_invariant(self):
        rng = np.random.default_rng(11)
        aa = torch.as_tensor(rng.normal(size=(200, 3)) * 2.0)
        r = rodrigues(aa)
        eye = torch.eye(3).expand_as(r)
        assert (r.transpose(-1, -2) @ r - eye).abs().max() < 1e-9
        assert (torch.linalg.det(r) - 1.0).abs().max() < 1e-9

    def test_small_angle_branch_is_continuous(self):
        tiny = rodrigues(torch.tensor([1e-9, 0.0, 0.0]))
        near = rodrigues(torch.tensor([1e-7, 0.0, 0.0]))
        assert (tiny - torch.eye(3)).abs().max() < 1e-8
        assert (near - tiny).abs().max() < 1e-6

    def test_non_finite_input_rejected(self):
        with pytest.raises(ValueError):
            rodrigues(torch.tensor([np.nan, 0.0, 0.0]))

    def test_log_map_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            aa = rng.normal(size=3)
            aa = aa / np.linalg.norm(aa) * rng.uniform(1e-4, np.pi - 1e-3)
            back = axis_angle_from_matrix(rodrigues(torch.as_tensor(aa)))
            assert np.abs(back.numpy() - aa).max() < 1e-6


@pytest.fixture(scope="module")
def skeleton():
    return default_skeleton()


def compose_world_oracle(pose_params, skeleton):
    """Oracle: explicit 4x4 forward-kinematics composition with numpy."""
    n = skeleton.num_joints
    world = [None] * n
    for j in range(n):
        local = np.eye(4)
        local[:3, :3] = matrix_exp_series(np.asarray(pose_params[j]))
        local[:3, 3] = skeleton.rest_offsets[j]
        p = skeleton.parents[j]
        world[j] = local if p < 0 else world[p] @ local
    return world


class TestBodyPose:
    def test_rest_pose_gives_identity_transforms(self, skeleton):
        pose = build_body_pose(torch.zeros(22, 3), skeleton)
        assert torch.equal(pose.R, torch.eye(3).expand(22, 3, 3).contiguous()) or torch.allclose(
            pose.R, torch.eye(3).expand(22, 3, 3), atol=0.0
        )
        assert pose.T.abs().max() == 0.0

    def test_root_quarter_turn_inverts_globally(self, skeleton):
        aa = torch.zeros(22, 3)
        aa[0, 2] = np.pi / 2
        pose = build_body_pose(aa, skeleton)

        # oracle: global transform = Trans(root) Rot Trans(-root); expect its inverse
        root = skeleton.rest_joints[0]
        rot = matrix_exp_series(np.array([0.0, 0.0, np.pi / 2]))
        global_tf = np.eye(4)
        global_tf[:3, :3] = rot
        global_tf[:3, 3] = root - rot @ root
        expected = np.linalg.inv(global_tf)
        for j in range(22):
            assert np.abs(pose.R[j].numpy() - expected[:3, :3]).max() < 1e-9
            assert np.abs(pose.T[j].numpy() - expected[:3, 3]).max() < 1e-9

    def test_elbow_rotation_leaves_other_subtrees_alone(self, skeleton):
        elbow = skeleton.names.index("left_elbow")
        aa = torch.zeros(22, 3)
        aa[elbow, 1] = 0.7
        pose = build_body_pose(aa, skeleton)

        # oracle: forward-kinematics chain comparison
        world = compose_world_oracle(aa.numpy(), skeleton)
        subtree = {elbow}
        changed = True
        while changed:
            changed = False
            for j in range(22):
                if skeleton.parents[j] in subtree and j not in subtree:
                    subtree.add(j)
                    changed = True
        for j in range(22):
            if j in subtree:
                continue
            assert np.abs(world[j] - np.eye(4) @ compose_world_oracle(np.zeros((22, 3)), skeleton)[j]).max() < 1e-12
            assert np.abs(pose.R[j].numpy() - np.eye(3)).max() < 1e-9
            assert np.abs(pose.T[j].numpy()).max() < 1e-9

    def test_inverse_property_for_attached_points(self, skeleton):
        # x rigidly following bone i must land on its rest-pose location
        rng = np.random.default_rng(5)
        aa = torch.as_tensor(rng.normal(size=(22, 3)) * 0.4)
        world = forward_kinematics(aa, skeleton)
        pose = build_body_pose(aa, skeleton)
        rest = torch.as_tensor(skeleton.rest_joints)
        for j in [0, 3, 9, 16, 18, 20]:
            x_rest = rest[j] + torch.as_tensor(rng.normal(size=3) * 0.1)
            local = x_rest - rest[j]
            x_obs = world[j, :3, :3] @ local + world[j, :3, 3]
            back = pose.R[j] @ x_obs + pose.T[j]
            assert (back - x_rest).abs().max() < 1e-10

    def test_wrong_joint_count_raises(self, skeleton):
        with pytest.raises(ValueError):
            build_body_pose(torch.zeros(21, 3), skeleton)

    def test_posed_joints_rest(self, skeleton):
        joints = posed_joints(torch.zeros(22, 3), skeleton)
        assert np.abs(joints.numpy() - skeleton.rest_joints).max() < 1e-12


class TestVectors:
    def test_zero_expression(self):
        e = build_expression(torch.zeros(10), torch.zeros(3))
        assert e.shape == (13,)
        assert e.abs().max() == 0.0

    def test_expression_concatenation(self):
        e = build_expression(torch.arange(1.0, 11.0), torch.tensor([0.1, 0.2, 0.3]))
        assert torch.equal(e, torch.tensor([1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0.1, 0.2, 0.3], dtype=e.dtype))

    def test_expression_shape_contract(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            e = build_expression(rng.normal(size=10), rng.normal(size=3))
            assert e.shape == (13,)
        with pytest.raises(ValueError):
            build_expression(torch.zeros(9), torch.zeros(3))

    def test_hand_pose_zeros(self):
        v = flatten_hand_pose(torch.zeros(15, 3), torch.zeros(15, 3))
        assert v.shape == (90,)
        assert v.abs().max() == 0.0

    def test_hand_pose_ordering(self):
        v = flatten_hand_pose(torch.ones(15, 3), torch.zeros(15, 3))
        assert v[:45].min() == 1.0 and v[45:].max() == 0.0

    def test_hand_pose_round_trip(self):
        rng = np.random.default_rng(1)
        left = torch.as_tensor(rng.normal(size=(15, 3)))
        right = torch.as_tensor(rng.normal(size=(15, 3)))
        back_l, back_r = unflatten_hand_pose(flatten_hand_pose(left, right))
        assert torch.equal(back_l, left) and torch.equal(back_r, right)

    def test_hand_pose_shape_error(self):
        with pytest.raises(ValueError):
            flatten_hand_pose(torch.zeros(14, 3), torch.zeros(15, 3))


class TestIdentityTable:
    def test_ten_identities(self):
        table = IdentityTable([f"id{k}" for k in range(10)])
        assert len(table) == 10
        for k in range(10):
            assert table.code(f"id{k}").shape == (32,)

    def test_same_label_returns_same_parameter(self):
        table = IdentityTable(["a", "b"])
        assert table.code("a") is table.code("a")

    def test_distinct_codes_at_init(self):
        table = IdentityTable(["a", "b"], seed=0)
        assert not torch.allclose(table.code("a"), table.code("b"))

    def test_duplicate_label_conflict(self):
        with pytest.raises(DuplicateIdentityError):
            IdentityTable(["a", "a"])

    def test_unknown_label_names_known_ids(self):
        table = IdentityTable(["a"])
        with pytest.raises(KeyError, match="a"):
            table.code("zz")

    def test_init_scale(self):
        table = IdentityTable([f"s{k}" for k in range(50)], init_std=0.01)
        stacked = torch.stack([table.code(f"s{k}") for k in range(50)])
        assert stacked.std() < 0.05


class TestSkeleton:
    def test_default_has_22_joints(self, skeleton):
        assert skeleton.num_joints == 22

    def test_single_root(self):
        with pytest.raises(ValueError):
            Skeleton(names=("a", "b"), parents=np.array([-1, -1]), rest_offsets=np.zeros((2, 3)))

    def test_file_round_trip(self, skeleton, tmp_path):
        path = tmp_path / "skel.json"
        skeleton.to_file(path)
        back = Skeleton.from_file(path)
        assert back.names == skeleton.names
        assert np.array_equal(back.parents, skeleton.parents)
        assert np.array_equal(back.rest_offsets, skeleton.rest_offsets)
