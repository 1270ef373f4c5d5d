"""Analytic capsule-human scene generator.

Ray-traced capsules rigidly attached to skeleton joints give frames with exact
masks and exact pose/camera records. Expression coefficients drive face-patch
coloring (component 0 = brow darkness, 1 = cheek tint), the jaw axis-angle
drives mouth opening, and hand axis-angles drive finger articulation in the
wrist frame — deformations the 22-bone skinning cannot explain, which is what
the hand deformation field is for.

Because every capsule's attachment joint is known, the generator doubles as
the ground-truth source for inverse-skinning tests.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import parts
from .conditioning import Skeleton, default_skeleton, forward_kinematics
from .data import SCHEMA_VERSION, DatasetManifest, FrameParams, load_dataset

import torch

DEFAULT_RADII = {
    "torso": 0.14,
    "hips": 0.09,
    "legs": 0.075,
    "feet": 0.06,
    "collar": 0.07,
    "arms": 0.055,
    "neck": 0.055,
    "head_link": 0.06,
    "head": 0.20,
    "palm": 0.09,
    "finger": 0.05,
}

SKIN = (0.85, 0.65, 0.50)

PALETTES = (
    {"torso": (0.75, 0.15, 0.15), "legs": (0.15, 0.15, 0.45), "arms": SKIN,
     "hands": (0.92, 0.70, 0.52), "head": (0.87, 0.66, 0.50), "feet": (0.10, 0.10, 0.10)},
    {"torso": (0.15, 0.30, 0.75), "legs": (0.20, 0.20, 0.20), "arms": (0.60, 0.45, 0.35),
     "hands": (0.64, 0.48, 0.36), "head": (0.60, 0.45, 0.34), "feet": (0.25, 0.20, 0.15)},
    {"torso": (0.45, 0.20, 0.60), "legs": (0.18, 0.28, 0.18), "arms": (0.75, 0.55, 0.42),
     "hands": (0.80, 0.58, 0.44), "head": (0.76, 0.56, 0.42), "feet": (0.15, 0.15, 0.25)},
)


@dataclass(frozen=True)
class SyntheticIdentity:
    label: str
    palette: dict
    motion_phase: float = 0.0
    motion_scale: float = 1.0


def identity_preset(k: int, label: str = None) -> SyntheticIdentity:
    return SyntheticIdentity(
        label=label or f"subject_{chr(ord('a') + k)}",
        palette=PALETTES[k % len(PALETTES)],
        motion_phase=0.8 * k,
    )


@dataclass(frozen=True)
class SyntheticSceneSpec:
    identities: tuple = (identity_preset(0),)
    frames: int = 8
    image_size: int = 64
    seed: int = 0
    fps: float = 30.0
    radii: dict = field(default_factory=lambda: dict(DEFAULT_RADII))
    arm_swing: float = 0.45
    arm_drop: float = 0.55  # mean lowering of the arms from the T pose
    elbow_swing: float = 0.5
    elbow_bend: float = 0.55
    finger_curl: float = 0.9
    jaw_max: float = 1.0
    expression_amp: float = 1.0
    camera_distance: float = 3.4
    camera_height: float = 0.9
    camera_orbit_deg: float = 0.0  # azimuth sweep over the whole sequence
    background: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CapsuleProto:
    """Capsule in the local frame of its attachment joint."""

    part: str
    label: int
    joint: int
    local_a: np.ndarray
    local_b: np.ndarray
    radius: float
    color: tuple


@dataclass
class WorldCapsule:
    a: np.ndarray
    b: np.ndarray
    radius: float
    color: tuple
    label: int
    joint: int
    part: str


_SEGMENTS = (
    # (part, label, segment parent joint -> child joint); attachment = parent
    ("hips", parts.BODY, 0, 1),
    ("hips", parts.BODY, 0, 2),
    ("torso", parts.BODY, 0, 3),
    ("legs", parts.BODY, 1, 4),
    ("legs", parts.BODY, 2, 5),
    ("torso", parts.BODY, 3, 6),
    ("legs", parts.BODY, 4, 7),
    ("legs", parts.BODY, 5, 8),
    ("torso", parts.BODY, 6, 9),
    ("feet", parts.BODY, 7, 10),
    ("feet", parts.BODY, 8, 11),
    ("neck", parts.BODY, 9, 12),
    ("collar", parts.BODY, 9, 13),
    ("collar", parts.BODY, 9, 14),
    ("head_link", parts.HEAD, 12, 15),
    ("collar", parts.BODY, 13, 16),
    ("collar", parts.BODY, 14, 17),
    ("arms", parts.ARMS, 16, 18),
    ("arms", parts.ARMS, 17, 19),
    ("arms", parts.ARMS, 18, 20),
    ("arms", parts.ARMS, 19, 21),
)

HEAD_JOINT = 15
LEFT_WRIST, RIGHT_WRIST = 20, 21
HEAD_OFFSET = np.array([0.0, 0.09, 0.0])
FINGERS_PER_HAND = 3
FINGER_LENGTH = 0.18
PALM_SHIFT = 0.05  # palm center sits this far beyond the wrist
FINGER_FAN = (-0.45, 0.0, 0.45)  # base fan angles, radians


def _part_color(palette: dict, part: str) -> tuple:
    alias = {
        "hips": "legs",
        "feet": "feet",
        "collar": "torso",
        "neck": "head",
        "head_link": "head",
        "head": "head",
        "torso": "torso",
        "legs": "legs",
        "arms": "arms",
        "palm": "hands",
        "finger": "hands",
    }
    return palette[alias[part]]


def rest_capsules(spec: SyntheticSceneSpec, identity: SyntheticIdentity, skeleton: Skeleton) -> list:
    """Static capsules (everything except fingers) in attachment-joint coordinates."""
    rest = skeleton.rest_joints
    protos = []
    for part, label, pj, cj in _SEGMENTS:
        protos.append(
            CapsuleProto(
                part=part,
                label=label,
                joint=pj,
                local_a=rest[pj] - rest[pj],
                local_b=rest[cj] - rest[pj],
                radius=spec.radii[part],
                color=_part_color(identity.palette, part),
            )
        )
    protos.append(
        CapsuleProto(
            part="head",
            label=parts.HEAD,
            joint=HEAD_JOINT,
            local_a=HEAD_OFFSET.copy(),
            local_b=HEAD_OFFSET.copy(),
            radius=spec.radii["head"],
            color=_part_color(identity.palette, "head"),
        )
    )
    return protos


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def finger_capsules(spec: SyntheticSceneSpec, identity: SyntheticIdentity, hands: np.ndarray, side: str) -> list:
    """Per-frame hand capsules in the wrist frame; curls come from the first
    FINGERS_PER_HAND joints' x components of that hand's pose half."""
    sign = 1.0 if side == "left" else -1.0
    wrist = LEFT_WRIST if side == "left" else RIGHT_WRIST
    half = hands[:45] if side == "left" else hands[45:]
    palm_center = np.array([sign * PALM_SHIFT, 0.0, 0.0])
    color = _part_color(identity.palette, "palm")
    caps = [
        CapsuleProto(
            part="palm",
            label=parts.HANDS,
            joint=wrist,
            local_a=palm_center.copy(),
            local_b=palm_center.copy(),
            radius=spec.radii["palm"],
            color=color,
        )
    ]
    outward = np.array([sign, 0.0, 0.0])
    for f in range(FINGERS_PER_HAND):
        curl = float(half[3 * f])  # x component of finger joint f
        direction = _rot_z(sign * (FINGER_FAN[f] - curl)) @ outward
        caps.append(
            CapsuleProto(
                part="finger",
                label=parts.HANDS,
                joint=wrist,
                local_a=palm_center.copy(),
                local_b=palm_center + FINGER_LENGTH * direction,
                radius=spec.radii["finger"],
                color=_part_color(identity.palette, "finger"),
            )
        )
    return caps


def posed_capsules(protos: list, world: np.ndarray) -> list:
    out = []
    for p in protos:
        rot = world[p.joint, :3, :3]
        trans = world[p.joint, :3, 3]
        out.append(
            WorldCapsule(
                a=rot @ p.local_a + trans,
                b=rot @ p.local_b + trans,
                radius=p.radius,
                color=p.color,
                label=p.label,
                joint=p.joint,
                part=p.part,
            )
        )
    return out


def motion_params(spec: SyntheticSceneSpec, identity: SyntheticIdentity, frame: int, phases: np.ndarray) -> dict:
    """Smooth one-cycle trigonometric motion; held-out stride frames are
    interpolations of their neighbors."""
    t = 2.0 * math.pi * frame / spec.frames + identity.motion_phase
    s = identity.motion_scale
    body = np.zeros((22, 3))
    body[16, 2] = -spec.arm_drop + spec.arm_swing * s * math.sin(t + phases[0])
    body[17, 2] = spec.arm_drop - spec.arm_swing * s * math.sin(t + phases[1])
    body[18, 2] = spec.elbow_bend + spec.elbow_swing * s * math.sin(t + phases[2])
    body[19, 2] = -spec.elbow_bend - spec.elbow_swing * s * math.sin(t + phases[3])
    body[3, 2] = 0.05 * math.sin(t + phases[4])
    body[15, 0] = 0.08 * math.sin(t + phases[5])

    hands = np.zeros(90)
    for side, base in (("left", 0), ("right", 45)):
        for f in range(FINGERS_PER_HAND):
            phase = phases[6] + 0.9 * f + (0.35 if side == "right" else 0.0)
            hands[base + 3 * f] = spec.finger_curl * 0.5 * (1.0 + math.sin(t + phase))

    psi = np.zeros(10)
    psi[0] = spec.expression_amp * 0.5 * (1.0 + math.sin(t + phases[7]))
    psi[1] = spec.expression_amp * 0.5 * (1.0 + math.cos(t + phases[8]))
    jaw = np.array([spec.jaw_max * 0.5 * (1.0 + math.sin(t + phases[9])), 0.0, 0.0])
    return {"body": body, "hands": hands, "psi": psi, "jaw": jaw}


def camera_for_frame(spec: SyntheticSceneSpec, frame: int) -> tuple:
    """(intrinsics, extrinsics). Static frontal by default; optional y-orbit."""
    size = spec.image_size
    f = 1.7 * size
    k = np.array([[f, 0.0, size / 2.0], [0.0, f, size / 2.0], [0.0, 0.0, 1.0]])
    azimuth = math.radians(spec.camera_orbit_deg) * (frame / max(spec.frames - 1, 1) - 0.5)
    ca, sa = math.cos(azimuth), math.sin(azimuth)
    orbit = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    pivot = np.array([0.0, spec.camera_height, 0.0])
    center = pivot + orbit @ np.array([0.0, 0.0, spec.camera_distance])
    flip = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])  # look along -z, v down
    rot = flip @ orbit.T
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ center
    return k, ext


def _ray_sphere(origins, dirs, center, radius):
    oc = origins - center[None]
    b = (oc * dirs).sum(-1)
    c = (oc * oc).sum(-1) - radius * radius
    disc = b * b - c
    t = np.full(len(origins), np.inf)
    ok = disc >= 0.0
    if ok.any():
        sq = np.sqrt(disc[ok])
        t0 = -b[ok] - sq
        t1 = -b[ok] + sq
        cand = np.where(t0 > 1e-6, t0, np.where(t1 > 1e-6, t1, np.inf))
        t[ok] = cand
    return t


def ray_capsule(origins, dirs, cap: WorldCapsule):
    """First-hit distances [n] of unit-direction rays against one capsule."""
    ab = cap.b - cap.a
    length = np.linalg.norm(ab)
    t_best = _ray_sphere(origins, dirs, cap.a, cap.radius)
    if length > 1e-9:
        u = ab / length
        m = origins - cap.a[None]
        d_par = dirs @ u
        m_par = m @ u
        d_perp = dirs - d_par[:, None] * u[None]
        m_perp = m - m_par[:, None] * u[None]
        a_q = (d_perp * d_perp).sum(-1)
        b_q = 2.0 * (m_perp * d_perp).sum(-1)
        c_q = (m_perp * m_perp).sum(-1) - cap.radius * cap.radius
        disc = b_q * b_q - 4.0 * a_q * c_q
        ok = (disc >= 0.0) & (a_q > 1e-12)
        if ok.any():
            sq = np.sqrt(disc[ok])
            t0 = (-b_q[ok] - sq) / (2.0 * a_q[ok])
            s = m_par[ok] + t0 * d_par[ok]
            good = (t0 > 1e-6) & (s >= 0.0) & (s <= length)
            idx = np.flatnonzero(ok)[good]
            t_best[idx] = np.minimum(t_best[idx], t0[good])
        t_best = np.minimum(t_best, _ray_sphere(origins, dirs, cap.b, cap.radius))
    return t_best


def _face_color(local: np.ndarray, base: np.ndarray, psi: np.ndarray, jaw_angle: float, radius: float):
    """Color of a head-sphere hit point given its head-frame offset from center."""
    color = base.copy()
    x, y, z = local
    if z <= 0.2 * radius:  # back of the head
        return color
    # cheeks tint with psi[1]
    cheek = min(max(float(psi[1]), 0.0), 1.0)
    if cheek > 0 and abs(y + 0.01) < 0.05 and (abs(x - 0.08) < 0.045 or abs(x + 0.08) < 0.045):
        color = (1 - 0.6 * cheek) * color + 0.6 * cheek * np.array([0.9, 0.25, 0.25])
    # brow band darkens with psi[0]
    brow = min(max(float(psi[0]), 0.0), 1.0)
    if brow > 0 and abs(x) < 0.09 and 0.045 < y < 0.09:
        color = (1 - 0.8 * brow) * color + 0.8 * brow * np.array([0.15, 0.10, 0.05])
    # static eyes
    if ((x - 0.055) ** 2 + (y - 0.02) ** 2 < 0.02**2) or ((x + 0.055) ** 2 + (y - 0.02) ** 2 < 0.02**2):
        color = np.array([0.08, 0.08, 0.10])
    # mouth opens with the jaw angle
    mouth_h = 0.012 + 0.085 * max(jaw_angle, 0.0)
    if abs(x) < 0.09 and abs(y + 0.075) < mouth_h:
        color = np.array([0.22, 0.04, 0.05])
    return color


def render_analytic_frame(spec, identity, skeleton, params: FrameParams, image_size: int = None):
    """Ray-trace one frame -> (rgb float [H, W, 3], mask uint8 [H, W])."""
    size = image_size or spec.image_size
    world = forward_kinematics(torch.as_tensor(params.body_pose), skeleton).numpy()
    capsules = posed_capsules(rest_capsules(spec, identity, skeleton), world)
    for side in ("left", "right"):
        capsules += posed_capsules(finger_capsules(spec, identity, params.hands, side), world)

    k = params.intrinsics
    ext = params.extrinsics
    rot = ext[:3, :3]
    center = -rot.T @ ext[:3, 3]
    cols, rows = np.meshgrid(np.arange(size), np.arange(size), indexing="xy")
    uv1 = np.stack([cols.reshape(-1) + 0.5, rows.reshape(-1) + 0.5, np.ones(size * size)], axis=-1)
    dirs = (np.linalg.inv(k) @ uv1.T).T @ rot
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(center, dirs.shape).copy()

    t_min = np.full(len(dirs), np.inf)
    hit_idx = np.full(len(dirs), -1, dtype=np.int64)
    for ci, cap in enumerate(capsules):
        t = ray_capsule(origins, dirs, cap)
        closer = t < t_min
        t_min[closer] = t[closer]
        hit_idx[closer] = ci

    rgb = np.tile(np.asarray(spec.background, dtype=np.float64), (len(dirs), 1))
    mask = np.zeros(len(dirs), dtype=np.uint8)
    head_rot = world[HEAD_JOINT, :3, :3]
    head_center = head_rot @ HEAD_OFFSET + world[HEAD_JOINT, :3, 3]
    jaw_angle = float(params.jaw[0])
    for ci, cap in enumerate(capsules):
        sel = np.flatnonzero(hit_idx == ci)
        if len(sel) == 0:
            continue
        mask[sel] = cap.label
        base = np.asarray(cap.color, dtype=np.float64)
        if cap.part == "head":
            hits = origins[sel] + t_min[sel, None] * dirs[sel]
            locals_ = (hits - head_center[None]) @ head_rot  # head-frame offsets
            for row, local in zip(sel, locals_):
                rgb[row] = _face_color(local, base, params.expression, jaw_angle, cap.radius)
        else:
            rgb[sel] = base
    return rgb.reshape(size, size, 3), mask.reshape(size, size)


def generate_synthetic(spec: SyntheticSceneSpec, out_path) -> DatasetManifest:
    """Write the dataset to disk (byte-identical under the same spec) and
    return the validated manifest."""
    root = Path(out_path)
    root.mkdir(parents=True, exist_ok=True)
    skeleton = default_skeleton()
    skeleton.to_file(root / "skeleton.json")
    rng = np.random.default_rng(spec.seed)
    for identity in spec.identities:
        phases = rng.uniform(0.0, 2.0 * math.pi, size=10)
        ident_dir = root / identity.label
        for sub in ("frames", "masks", "params"):
            (ident_dir / sub).mkdir(parents=True, exist_ok=True)
        for f in range(spec.frames):
            motion = motion_params(spec, identity, f, phases)
            k, ext = camera_for_frame(spec, f)
            params = FrameParams(
                body_pose=motion["body"],
                expression=motion["psi"],
                jaw=motion["jaw"],
                hands=motion["hands"],
                intrinsics=k,
                extrinsics=ext,
            )
            rgb, mask = render_analytic_frame(spec, identity, skeleton, params)
            name = f"frame_{f:05d}"
            Image.fromarray((np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)).save(
                ident_dir / "frames" / f"{name}.png"
            )
            Image.fromarray(mask, mode="L").save(ident_dir / "masks" / f"{name}.png")
            with open(ident_dir / "params" / f"{name}.json", "w") as fh:
                json.dump(params.to_dict(), fh)
                fh.write("\n")
        meta = {
            "schema_version": SCHEMA_VERSION,
            "fps": spec.fps,
            "resolution": [spec.image_size, spec.image_size],
            "background_color": list(spec.background),
            "skeleton": "../skeleton.json",
            "num_frames": spec.frames,
        }
        with open(ident_dir / "meta.json", "w") as fh:
            json.dump(meta, fh, indent=2)
            fh.write("\n")
    return load_dataset(root)


def bone_attached_points(spec, identity, skeleton, params: FrameParams, per_capsule: int = 4, seed: int = 0):
    """Ground-truth skinning correspondences from the capsule layout.

    Returns (obs [n, 3], rest [n, 3], joint [n]) for points sampled inside the
    body capsules (fingers excluded — their motion is not bone-rigid).
    """
    rng = np.random.default_rng(seed)
    world = forward_kinematics(torch.as_tensor(params.body_pose), skeleton).numpy()
    rest_joints = skeleton.rest_joints
    obs, rest, joints = [], [], []
    for proto in rest_capsules(spec, identity, skeleton):
        for _ in range(per_capsule):
            s = rng.uniform(0.15, 0.85)
            radial = rng.normal(size=3)
            radial /= np.linalg.norm(radial)
            local = proto.local_a + s * (proto.local_b - proto.local_a) + radial * proto.radius * 0.5
            rest_pt = local + rest_joints[proto.joint]
            world_pt = world[proto.joint, :3, :3] @ local + world[proto.joint, :3, 3]
            obs.append(world_pt)
            rest.append(rest_pt)
            joints.append(proto.joint)
    return np.asarray(obs), np.asarray(rest), np.asarray(joints, dtype=np.int64)
