"""Observation-to-canonical mapping.

Inverse linear blend skinning against a learnable blend-weight voxel grid,
plus bounded offset networks for non-rigid (pose-conditioned) and hand
(hand-pose-conditioned) deformation.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import BodyPose, Skeleton
from .encoding import PositionalEncoding

FG_EPS = 1e-12  # below this total foreground mass a point is declared empty


def init_linear(layer: nn.Linear, generator: torch.Generator) -> None:
    """Default torch Linear init (kaiming-uniform, a=sqrt(5)) but seedable."""
    fan_in = layer.weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


@dataclass
class CanonicalPoint:
    """Batch of canonical-space points and their total foreground blend mass."""

    x: torch.Tensor  # [n, 3]
    fg: torch.Tensor  # [n], in [0, 1]; multiplies density downstream


class BlendWeightVolume(nn.Module):
    """Learnable (K+1)-channel log-weight grid over the canonical bounding box.

    Channel K is background. Softmax runs over channels per voxel; off-grid
    queries trilinearly interpolate the softmaxed weights with border clamping,
    so interpolated weights still sum to 1 across channels.
    """

    def __init__(
        self,
        bbox_min,
        bbox_max,
        resolution: int = 32,
        num_bones: int = 22,
        bg_bias: float = 3.0,
        bump_amplitude: float = 6.0,
        bone_midpoints=None,
        bone_sigmas=None,
    ):
        super().__init__()
        self.num_bones = num_bones
        self.register_buffer("bbox_min", torch.as_tensor(bbox_min, dtype=torch.float32))
        self.register_buffer("bbox_max", torch.as_tensor(bbox_max, dtype=torch.float32))
        logits = torch.zeros(num_bones + 1, resolution, resolution, resolution)
        logits[num_bones] = bg_bias
        if bone_midpoints is not None:
            logits[:num_bones] = self._bump_init(
                resolution, bone_midpoints, bone_sigmas, bump_amplitude
            )
        self.logits = nn.Parameter(logits)

    def _bump_init(self, res, midpoints, sigmas, amplitude):
        # grid voxel (iz, iy, ix) sits at normalized node coordinates (align_corners)
        axes = [torch.linspace(float(a), float(b), res) for a, b in zip(self.bbox_min, self.bbox_max)]
        zz, yy, xx = torch.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        coords = torch.stack([xx, yy, zz], dim=-1)  # [D, H, W, 3] in world units
        mids = torch.as_tensor(np.asarray(midpoints), dtype=torch.float32)
        sig = torch.as_tensor(np.asarray(sigmas), dtype=torch.float32).clamp_min(1e-3)
        d2 = ((coords[None] - mids[:, None, None, None, :]) ** 2).sum(-1)  # [K, D, H, W]
        return amplitude * torch.exp(-d2 / (2.0 * sig[:, None, None, None] ** 2))

    @classmethod
    def for_skeleton(cls, skeleton: Skeleton, resolution=32, margin=0.35, bg_bias=3.0, bump_amplitude=6.0):
        """Grid spanning the rest skeleton, bone channels seeded with Gaussian
        bumps at bone midpoints (sigma = half bone length)."""
        rest = skeleton.rest_joints
        mids = np.empty_like(rest)
        sigmas = np.empty(skeleton.num_joints)
        for j in range(skeleton.num_joints):
            p = skeleton.parents[j]
            anchor = rest[p] if p >= 0 else rest[j]
            mids[j] = (rest[j] + anchor) / 2.0
            length = np.linalg.norm(rest[j] - anchor)
            sigmas[j] = max(length / 2.0, 0.04)
        lo = rest.min(axis=0) - margin
        hi = rest.max(axis=0) + margin
        return cls(
            lo,
            hi,
            resolution=resolution,
            num_bones=skeleton.num_joints,
            bg_bias=bg_bias,
            bump_amplitude=bump_amplitude,
            bone_midpoints=mids,
            bone_sigmas=sigmas,
        )

    def canonical_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Sample softmaxed channel weights at canonical points x [n, 3] -> [n, K+1]."""
        probs = torch.softmax(self.logits.to(x.dtype), dim=0)  # [C, D, H, W]
        lo = self.bbox_min.to(x.dtype)
        hi = self.bbox_max.to(x.dtype)
        norm = (x - lo) / (hi - lo) * 2.0 - 1.0  # grid_sample expects (x, y, z) in [-1, 1]
        grid = norm.reshape(1, 1, 1, -1, 3)
        sampled = F.grid_sample(
            probs[None], grid, mode="bilinear", padding_mode="border", align_corners=True
        )
        return sampled[0, :, 0, 0, :].transpose(0, 1)  # [n, C]

    def query(self, x_obs: torch.Tensor, pose: BodyPose):
        """Observation points [n, 3] -> (skinning weights [n, K], fg mass [n]).

        Each bone's weight is the canonical grid value at that bone's candidate
        R_i x + t_i; the background channel never enters the numerator. A total
        foreground mass below FG_EPS yields all-zero weights and fg = 0.
        """
        n = x_obs.shape[0]
        k = self.num_bones
        rot = pose.R.to(x_obs.dtype)
        trans = pose.T.to(x_obs.dtype)
        candidates = torch.einsum("kij,nj->nki", rot, x_obs) + trans  # [n, K, 3]
        flat = candidates.reshape(n * k, 3)
        probs = self.canonical_weights(flat).reshape(n, k, k + 1)
        idx = torch.arange(k, device=x_obs.device)
        per_bone = probs[:, idx, idx]  # weight of channel i at candidate i -> [n, K]
        mass = per_bone.sum(dim=1)  # [n]
        valid = mass > FG_EPS
        safe = torch.where(valid, mass, torch.ones_like(mass))
        weights = torch.where(valid[:, None], per_bone / safe[:, None], torch.zeros_like(per_bone))
        fg = torch.where(valid, mass.clamp(max=1.0), torch.zeros_like(mass))
        return weights, fg, candidates


def rigid_deform(x: torch.Tensor, pose: BodyPose, weights: torch.Tensor, candidates=None) -> torch.Tensor:
    """Inverse LBS: sum_i w_i (R_i x + t_i) for points [n, 3], weights [n, K]."""
    if not torch.isfinite(x).all():
        raise ValueError("non-finite points")
    if candidates is None:
        rot = pose.R.to(x.dtype)
        trans = pose.T.to(x.dtype)
        candidates = torch.einsum("kij,nj->nki", rot, x) + trans
    return (weights[..., None] * candidates).sum(dim=1)


class OffsetField(nn.Module):
    """Coordinate MLP mapping (windowed-encoded point, condition) -> bounded 3-d offset.

    tanh output scaled by `max_offset`; the final layer is zero-initialized so
    the field starts as the identity mapping.
    """

    def __init__(
        self,
        cond_dim: int,
        num_bands: int = 6,
        depth: int = 6,
        width: int = 128,
        max_offset: float = 0.1,
        generator: torch.Generator = None,
    ):
        super().__init__()
        self.encoding = PositionalEncoding(num_bands=num_bands)
        self.cond_dim = cond_dim
        self.max_offset = max_offset
        dims = [self.encoding.dim + cond_dim] + [width] * (depth - 1) + [3]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        gen = generator or torch.Generator().manual_seed(0)
        for layer in self.layers:
            init_linear(layer, gen)
        with torch.no_grad():
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()

    def forward(self, x: torch.Tensor, cond: torch.Tensor, alpha: float = None) -> torch.Tensor:
        if cond.dim() == 1:
            cond = cond[None].expand(x.shape[0], -1)
        h = torch.cat([self.encoding(x, alpha=alpha), cond], dim=-1)
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        return torch.tanh(self.layers[-1](h)) * self.max_offset


class Deformer(nn.Module):
    """Full observation-to-canonical map: inverse LBS plus the gated non-rigid field."""

    def __init__(self, volume: BlendWeightVolume, nonrigid: OffsetField, nonrigid_start: int = 100_000):
        super().__init__()
        self.volume = volume
        self.nonrigid = nonrigid
        self.nonrigid_start = nonrigid_start

    def nonrigid_offset(self, x_r, pose_flat, iteration: int, alpha: float = None) -> torch.Tensor:
        """Zero until the gate iteration, then the bounded network offset."""
        if iteration < self.nonrigid_start:
            return torch.zeros_like(x_r)
        return self.nonrigid(x_r, pose_flat, alpha=alpha)

    def to_canonical(self, x, pose: BodyPose, pose_flat, iteration: int = 0, alpha: float = None) -> CanonicalPoint:
        weights, fg, candidates = self.volume.query(x, pose)
        x_r = rigid_deform(x, pose, weights, candidates=candidates)
        x_c = x_r + self.nonrigid_offset(x_r, pose_flat, iteration, alpha=alpha)
        return CanonicalPoint(x=x_c, fg=fg)
