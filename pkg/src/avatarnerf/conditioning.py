"""Per-frame conditioning signals.

Joint transforms from axis-angle pose vectors (forward kinematics + the
per-bone observation-to-canonical inverses used by the skinning), expression
and hand-pose vectors, and the learned per-identity code table.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

NUM_JOINTS = 22
JOINTS_PER_HAND = 15
EXPRESSION_COEFFS = 10
EXPRESSION_DIM = 13  # 10 coefficients + 3 jaw axis-angle
HAND_POSE_DIM = 90  # 2 hands x 15 joints x 3
IDENTITY_CODE_DIM = 32


class DuplicateIdentityError(ValueError):
    """Raised when an identity label would collide with an existing code."""


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.get_default_dtype())


def skew(v: torch.Tensor) -> torch.Tensor:
    """(..., 3) -> (..., 3, 3) skew-symmetric cross-product matrix."""
    zero = torch.zeros_like(v[..., 0])
    rows = torch.stack(
        [
            torch.stack([zero, -v[..., 2], v[..., 1]], dim=-1),
            torch.stack([v[..., 2], zero, -v[..., 0]], dim=-1),
            torch.stack([-v[..., 1], v[..., 0], zero], dim=-1),
        ],
        dim=-2,
    )
    return rows


def rodrigues(aa) -> torch.Tensor:
    """Axis-angle (..., 3) -> rotation matrix (..., 3, 3).

    R = I + sin(t)/t * K + (1-cos(t))/t^2 * K^2 with t = |v| and K = skew(v).
    Below |v| = 1e-8 the two coefficients use their second-order Taylor
    expansions, keeping the map smooth and differentiable through zero.
    """
    v = _as_tensor(aa)
    if v.shape[-1] != 3:
        raise ValueError(f"axis-angle must have last dimension 3, got {tuple(v.shape)}")
    if not torch.isfinite(v).all():
        raise ValueError("non-finite axis-angle input")
    theta_sq = (v * v).sum(dim=-1)
    theta = torch.sqrt(theta_sq)
    small = theta < 1e-8
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    safe = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(safe) / safe)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(safe)) / safe_sq)
    k = skew(v)
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(*v.shape[:-1], 3, 3)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def axis_angle_from_matrix(rot) -> torch.Tensor:
    """Rotation matrix (..., 3, 3) -> axis-angle (..., 3) (log map, angle in [0, pi])."""
    r = _as_tensor(rot)
    trace = r[..., 0, 0] + r[..., 1, 1] + r[..., 2, 2]
    cos = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0)
    angle = torch.acos(cos)
    axis_raw = torch.stack(
        [
            r[..., 2, 1] - r[..., 1, 2],
            r[..., 0, 2] - r[..., 2, 0],
            r[..., 1, 0] - r[..., 0, 1],
        ],
        dim=-1,
    )
    sin = torch.sin(angle)
    small = angle < 1e-6
    near_pi = (np.pi - angle) < 1e-4
    safe_sin = torch.where(small | near_pi, torch.ones_like(sin), sin)
    aa = axis_raw * (angle / (2.0 * safe_sin))[..., None]
    # near pi the off-diagonal difference degenerates; recover axis from R + I
    if near_pi.any():
        m = r + torch.eye(3, dtype=r.dtype, device=r.device)
        # column with the largest norm of (R + I) is parallel to the axis
        norms = torch.linalg.norm(m, dim=-2)
        idx = norms.argmax(dim=-1)
        col = torch.gather(m, -1, idx[..., None, None].expand(*m.shape[:-1], 1)).squeeze(-1)
        col = col / torch.linalg.norm(col, dim=-1, keepdim=True).clamp_min(1e-12)
        aa = torch.where(near_pi[..., None], col * angle[..., None], aa)
    aa = torch.where(small[..., None], axis_raw / 2.0, aa)
    return aa


@dataclass(frozen=True)
class Skeleton:
    """Fixed kinematic chain: joint names, parent indices (root = -1) and
    rest-pose bone offsets expressed in the parent joint frame."""

    names: tuple
    parents: np.ndarray  # [J] int
    rest_offsets: np.ndarray  # [J, 3]

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", offsets)
        n = len(self.names)
        if parents.shape != (n,) or offsets.shape != (n, 3):
            raise ValueError("skeleton arrays inconsistent with joint count")
        roots = np.flatnonzero(parents < 0)
        if len(roots) != 1:
            raise ValueError(f"skeleton must have exactly one root, got {len(roots)}")
        if not np.all(parents[1:] < np.arange(1, n)):
            raise ValueError("skeleton parents must be topologically ordered (parent index < joint index)")

    @property
    def num_joints(self) -> int:
        return len(self.names)

    @property
    def rest_joints(self) -> np.ndarray:
        """[J, 3] world-space joint positions in the rest pose."""
        joints = np.zeros_like(self.rest_offsets)
        for j in range(self.num_joints):
            p = self.parents[j]
            joints[j] = self.rest_offsets[j] if p < 0 else joints[p] + self.rest_offsets[j]
        return joints

    def children(self, j: int) -> list:
        return [int(c) for c in np.flatnonzero(self.parents == j)]

    @classmethod
    def from_file(cls, path) -> "Skeleton":
        with open(path) as fh:
            doc = json.load(fh)
        joints = doc["joints"]
        return cls(
            names=tuple(j["name"] for j in joints),
            parents=np.array([j["parent"] for j in joints], dtype=np.int64),
            rest_offsets=np.array([j["offset"] for j in joints], dtype=np.float64),
        )

    def to_file(self, path) -> None:
        doc = {
            "joints": [
                {"name": n, "parent": int(p), "offset": [float(x) for x in o]}
                for n, p, o in zip(self.names, self.parents, self.rest_offsets)
            ]
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


def default_skeleton() -> Skeleton:
    """The fixed 22-joint humanoid definition shipped with the package."""
    from importlib import resources

    with resources.files("avatarnerf.assets").joinpath("skeleton_22.json").open() as fh:
        doc = json.load(fh)
    joints = doc["joints"]
    return Skeleton(
        names=tuple(j["name"] for j in joints),
        parents=np.array([j["parent"] for j in joints], dtype=np.int64),
        rest_offsets=np.array([j["offset"] for j in joints], dtype=np.float64),
    )


@dataclass
class BodyPose:
    """Per-joint observation-to-canonical rigid transforms: x_rest = R_i x_obs + t_i
    for a point rigidly attached to bone i."""

    R: torch.Tensor  # [J, 3, 3]
    T: torch.Tensor  # [J, 3]

    def validate(self, atol: float = 1e-6) -> None:
        eye = torch.eye(3, dtype=self.R.dtype)
        ortho = (self.R.transpose(-1, -2) @ self.R - eye).abs().max()
        det = torch.linalg.det(self.R)
        if ortho > atol or (det - 1.0).abs().max() > atol:
            raise ValueError("rotation blocks must be orthonormal with det +1")


def forward_kinematics(pose_params, skeleton: Skeleton) -> torch.Tensor:
    """Axis-angles [J, 3] -> posed world transforms [J, 4, 4].

    W_root = Trans(offset_root) @ Rot(aa_root); W_j = W_parent @ Trans(offset_j) @ Rot(aa_j).
    """
    aa = _as_tensor(pose_params)
    n = skeleton.num_joints
    if aa.shape != (n, 3):
        raise ValueError(f"expected pose_params of shape ({n}, 3), got {tuple(aa.shape)}")
    rots = rodrigues(aa)  # [J, 3, 3]
    offsets = torch.as_tensor(skeleton.rest_offsets, dtype=aa.dtype, device=aa.device)
    world = []
    for j in range(n):
        local = torch.eye(4, dtype=aa.dtype, device=aa.device).clone()
        local[:3, :3] = rots[j]
        local[:3, 3] = offsets[j]
        p = skeleton.parents[j]
        world.append(local if p < 0 else world[p] @ local)
    return torch.stack(world)


def posed_joints(pose_params, skeleton: Skeleton) -> torch.Tensor:
    """[J, 3] posed world joint positions."""
    return forward_kinematics(pose_params, skeleton)[:, :3, 3]


def invert_rigid(mat: torch.Tensor) -> torch.Tensor:
    """Inverse of rigid 4x4 transforms without a general solve."""
    rot = mat[..., :3, :3]
    t = mat[..., :3, 3]
    inv = torch.zeros_like(mat)
    inv[..., :3, :3] = rot.transpose(-1, -2)
    inv[..., :3, 3] = -(rot.transpose(-1, -2) @ t[..., None]).squeeze(-1)
    inv[..., 3, 3] = 1.0
    return inv


def build_body_pose(pose_params, skeleton: Skeleton) -> BodyPose:
    """Per-joint inverse transforms mapping observation points to the rest pose.

    Composes world transforms by forward kinematics, then forms
    G_i = A_i @ W_i^-1 with A_i the rest-pose world transform, so that a point
    rigidly following bone i lands back on its rest-pose location.
    """
    world = forward_kinematics(pose_params, skeleton)
    rest = torch.as_tensor(skeleton.rest_joints, dtype=world.dtype, device=world.device)
    inv_world = invert_rigid(world)
    rot = inv_world[:, :3, :3]
    t = rest + inv_world[:, :3, 3]  # A_i is a pure translation by the rest joint
    return BodyPose(R=rot, T=t)


def build_expression(psi, jaw) -> torch.Tensor:
    """Concatenate 10 expression coefficients and the 3-d jaw axis-angle."""
    psi_t = _as_tensor(psi)
    jaw_t = _as_tensor(jaw)
    if psi_t.shape != (EXPRESSION_COEFFS,):
        raise ValueError(f"expected {EXPRESSION_COEFFS} expression coefficients, got {tuple(psi_t.shape)}")
    if jaw_t.shape != (3,):
        raise ValueError(f"expected jaw axis-angle of shape (3,), got {tuple(jaw_t.shape)}")
    return torch.cat([psi_t, jaw_t])


def flatten_hand_pose(left, right) -> torch.Tensor:
    """Left then right hand axis-angles (15 joints each) -> flat 90-vector."""
    left_t = _as_tensor(left)
    right_t = _as_tensor(right)
    if left_t.shape != (JOINTS_PER_HAND, 3) or right_t.shape != (JOINTS_PER_HAND, 3):
        raise ValueError(
            f"expected two ({JOINTS_PER_HAND}, 3) hand poses, got {tuple(left_t.shape)} and {tuple(right_t.shape)}"
        )
    return torch.cat([left_t.reshape(-1), right_t.reshape(-1)])


def unflatten_hand_pose(vec) -> tuple:
    v = _as_tensor(vec)
    if v.shape != (HAND_POSE_DIM,):
        raise ValueError(f"expected hand pose of shape ({HAND_POSE_DIM},), got {tuple(v.shape)}")
    half = HAND_POSE_DIM // 2
    return v[:half].reshape(JOINTS_PER_HAND, 3), v[half:].reshape(JOINTS_PER_HAND, 3)


class IdentityTable(nn.Module):
    """Learnable per-subject embedding table.

    One code per subject, identical across all of that subject's frames.
    Codes start from N(0, init_std^2) so early training is identity-agnostic.
    """

    def __init__(self, ids, dim: int = IDENTITY_CODE_DIM, init_std: float = 0.01, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.init_std = init_std
        self._seed = seed
        self.codes = nn.ParameterDict()
        for label in ids:
            self.add(str(label))

    def add(self, label: str) -> torch.Tensor:
        if label in self.codes:
            raise DuplicateIdentityError(f"identity {label!r} already has a code")
        gen = torch.Generator()
        gen.manual_seed(_label_seed(self._seed, label))
        code = torch.empty(self.dim).normal_(0.0, self.init_std, generator=gen)
        self.codes[label] = nn.Parameter(code)
        return self.codes[label]

    def code(self, label: str) -> torch.Tensor:
        if label not in self.codes:
            raise KeyError(f"unknown identity {label!r}; known: {sorted(self.codes.keys())}")
        return self.codes[label]

    def labels(self) -> list:
        return sorted(self.codes.keys())

    def freeze(self, labels) -> None:
        for label in labels:
            self.code(label).requires_grad_(False)

    def __contains__(self, label: str) -> bool:
        return label in self.codes

    def __len__(self) -> int:
        return len(self.codes)


def _label_seed(seed: int, label: str) -> int:
    from .utils import derive_seed

    return derive_seed(seed, "identity-code", label)


@dataclass
class FrameConditioning:
    """Everything a single frame contributes to the field inputs."""

    body_pose: BodyPose
    pose_flat: torch.Tensor  # [66] body axis-angles, flattened
    expression: torch.Tensor  # [13]
    hand_pose: torch.Tensor  # [90]
    identity: str
    posed_joints: torch.Tensor = field(default=None)  # [J, 3], used for ray bounds
