"""On-disk dataset schema, loader/validator and holdout splitting.

Layout (schema_version 1):

    root/
      skeleton.json               # joint names, parents, rest offsets
      <identity>/
        meta.json                 # fps, resolution, background_color, skeleton ref, schema_version
        frames/frame_00000.png    # RGB, 8-bit
        masks/frame_00000.png     # single channel, labels 0..4 (see parts.py)
        params/frame_00000.json   # per-frame pose/expression/hand/camera record

Parameter records are plain JSON (one per frame) for diffability; images are
lossless PNG.
"""

import copy
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import parts
from .conditioning import (
    FrameConditioning,
    Skeleton,
    build_body_pose,
    build_expression,
    posed_joints,
)
from .render import Camera

SCHEMA_VERSION = 1


class DatasetError(ValueError):
    """Dataset failed validation; message names the offending files."""


@dataclass
class FrameParams:
    body_pose: np.ndarray  # [22, 3] axis-angles
    expression: np.ndarray  # [10]
    jaw: np.ndarray  # [3]
    hands: np.ndarray  # [90]
    intrinsics: np.ndarray  # [3, 3]
    extrinsics: np.ndarray  # [4, 4]

    def to_dict(self) -> dict:
        return {
            "body_pose": self.body_pose.tolist(),
            "expression": self.expression.tolist(),
            "jaw": self.jaw.tolist(),
            "hands": self.hands.tolist(),
            "intrinsics": self.intrinsics.tolist(),
            "extrinsics": self.extrinsics.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FrameParams":
        return cls(
            body_pose=np.asarray(doc["body_pose"], dtype=np.float64),
            expression=np.asarray(doc["expression"], dtype=np.float64),
            jaw=np.asarray(doc["jaw"], dtype=np.float64),
            hands=np.asarray(doc["hands"], dtype=np.float64),
            intrinsics=np.asarray(doc["intrinsics"], dtype=np.float64),
            extrinsics=np.asarray(doc["extrinsics"], dtype=np.float64),
        )

    def validate(self, where: str) -> None:
        shapes = {
            "body_pose": (self.body_pose, (22, 3)),
            "expression": (self.expression, (10,)),
            "jaw": (self.jaw, (3,)),
            "hands": (self.hands, (90,)),
            "intrinsics": (self.intrinsics, (3, 3)),
            "extrinsics": (self.extrinsics, (4, 4)),
        }
        for name, (arr, expected) in shapes.items():
            if arr.shape != expected:
                raise DatasetError(f"{where}: {name} has shape {arr.shape}, expected {expected}")
            if not np.isfinite(arr).all():
                raise DatasetError(f"{where}: {name} contains non-finite values")
        rot = self.extrinsics[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6:
            raise DatasetError(f"{where}: camera rotation is not orthonormal")
        if np.linalg.norm(self.body_pose, axis=-1).max() >= 2 * math.pi:
            raise DatasetError(f"{where}: axis-angle magnitude exceeds 2*pi")


@dataclass
class FrameRecord:
    index: int
    image_path: Path
    mask_path: Path
    params: FrameParams

    def load_image(self) -> np.ndarray:
        return np.asarray(Image.open(self.image_path).convert("RGB"), dtype=np.float32) / 255.0

    def load_mask(self) -> np.ndarray:
        return np.asarray(Image.open(self.mask_path).convert("L"), dtype=np.uint8)

    def camera(self) -> Camera:
        with Image.open(self.image_path) as im:
            w, h = im.size
        return Camera(
            intrinsics=self.params.intrinsics,
            extrinsics=self.params.extrinsics,
            width=w,
            height=h,
        )


@dataclass
class IdentityData:
    label: str
    root: Path
    frames: list
    meta: dict


@dataclass
class DatasetManifest:
    root: Path
    identities: dict
    skeleton: Skeleton

    @property
    def labels(self) -> list:
        return sorted(self.identities.keys())

    def frames_of(self, label: str) -> list:
        return self.identities[label].frames

    def background_of(self, label: str):
        return tuple(self.identities[label].meta.get("background_color", (0.0, 0.0, 0.0)))


def _frame_name(i: int) -> str:
    return f"frame_{i:05d}"


def load_dataset(path) -> DatasetManifest:
    """Load and eagerly validate a dataset root (one subdirectory per identity)."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    skeleton_path = root / "skeleton.json"
    if not skeleton_path.exists():
        raise DatasetError(f"missing skeleton definition {skeleton_path}")
    skeleton = Skeleton.from_file(skeleton_path)

    identities = {}
    for entry in sorted(root.iterdir()):
        if not entry.is_dir():
            continue
        meta_path = entry / "meta.json"
        if not meta_path.exists():
            continue  # not an identity directory
        identities[entry.name] = _load_identity(entry, skeleton)
    if not identities:
        raise DatasetError(f"no identity directories under {root}")
    return DatasetManifest(root=root, identities=identities, skeleton=skeleton)


def _load_identity(directory: Path, skeleton: Skeleton) -> IdentityData:
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{directory}: unsupported schema_version {meta.get('schema_version')}")
    frames_dir = directory / "frames"
    masks_dir = directory / "masks"
    params_dir = directory / "params"
    for sub in (frames_dir, masks_dir, params_dir):
        if not sub.is_dir():
            raise DatasetError(f"{directory}: missing subdirectory {sub.name}/")

    image_files = sorted(frames_dir.glob("frame_*.png"))
    param_files = sorted(params_dir.glob("frame_*.json"))
    if len(image_files) != len(param_files):
        raise DatasetError(
            f"{directory}: {len(image_files)} frames but {len(param_files)} params records"
        )
    if not image_files:
        raise DatasetError(f"{directory}: no frames")

    records = []
    problems = []
    for i, image_path in enumerate(image_files):
        stem = image_path.stem
        mask_path = masks_dir / f"{stem}.png"
        param_path = params_dir / f"{stem}.json"
        if not mask_path.exists():
            problems.append(f"missing mask for {stem}")
            continue
        if not param_path.exists():
            problems.append(f"missing params for {stem}")
            continue
        with open(param_path) as fh:
            params = FrameParams.from_dict(json.load(fh))
        try:
            params.validate(f"{directory.name}/{stem}")
        except DatasetError as err:
            problems.append(str(err))
            continue
        with Image.open(image_path) as im:
            frame_size = im.size
        mask = np.asarray(Image.open(mask_path).convert("L"))
        if mask.shape[::-1] != frame_size:
            problems.append(f"{stem}: mask size {mask.shape[::-1]} != frame size {frame_size}")
        bad = np.setdiff1d(np.unique(mask), np.arange(parts.NUM_CLASSES))
        if bad.size:
            problems.append(f"{stem}: mask {mask_path.name} contains invalid labels {bad.tolist()}")
        records.append(FrameRecord(index=i, image_path=image_path, mask_path=mask_path, params=params))
    if problems:
        raise DatasetError(f"{directory}: " + "; ".join(problems))
    return IdentityData(label=directory.name, root=directory, frames=records, meta=meta)


def holdout_split(manifest: DatasetManifest, fraction: float):
    """Deterministic stride split per identity: every ceil(1/fraction)-th frame
    is held out. Returns (train, test) manifests over the same identities."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    stride = math.ceil(1.0 / fraction)
    train = copy.copy(manifest)
    test = copy.copy(manifest)
    train.identities = {}
    test.identities = {}
    for label, ident in manifest.identities.items():
        held = ident.frames[::stride]
        kept = [f for i, f in enumerate(ident.frames) if i % stride != 0]
        if not held or not kept:
            raise ValueError(f"split would leave an empty side for identity {label!r}")
        train.identities[label] = IdentityData(label=label, root=ident.root, frames=kept, meta=ident.meta)
        test.identities[label] = IdentityData(label=label, root=ident.root, frames=held, meta=ident.meta)
    return train, test


def frame_conditioning(record: FrameRecord, skeleton: Skeleton, identity: str, dtype=None):
    """FrameConditioning + Camera for one frame record."""
    import torch

    dtype = dtype or torch.get_default_dtype()
    params = record.params
    aa = torch.as_tensor(params.body_pose, dtype=dtype)
    cond = FrameConditioning(
        body_pose=build_body_pose(aa, skeleton),
        pose_flat=aa.reshape(-1),
        expression=build_expression(
            torch.as_tensor(params.expression, dtype=dtype), torch.as_tensor(params.jaw, dtype=dtype)
        ),
        hand_pose=torch.as_tensor(params.hands, dtype=dtype),
        identity=identity,
        posed_joints=posed_joints(aa, skeleton),
    )
    return cond, record.camera()
