"""Pluggable perceptual feature extractors.

The built-in extractor is a fixed-seed random convolutional stack: deterministic,
dependency-free, differentiable. A pretrained backbone implementing the same
callable interface (images [B, 3, H, W] -> list of feature maps) can be swapped
in for full-fidelity runs.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

MIN_INPUT = 16  # smaller inputs are bilinearly upsampled before feature extraction


class RandomConvFeatures(nn.Module):
    """Three stages of frozen random 3x3 convolutions with ReLU and 2x2 pooling."""

    def __init__(self, seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [3, *widths]
        self.convs = nn.ModuleList()
        for a, b in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(a, b, kernel_size=3, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (a * 9)) ** 0.5, generator=gen)
                conv.bias.zero_()
            self.convs.append(conv)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> list:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected images [B, 3, H, W], got {tuple(images.shape)}")
        h = images
        feats = []
        for conv in self.convs:
            h = F.relu(conv(h))
            feats.append(h)
            h = F.avg_pool2d(h, 2)
        return feats


def _unit_normalize(feat: torch.Tensor) -> torch.Tensor:
    return feat / feat.norm(dim=1, keepdim=True).clamp_min(1e-10)


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractor=None) -> torch.Tensor:
    """Mean feature-space distance between image batches [B, 3, H, W] in [0, 1].

    Channel-unit-normalized features per stage, squared differences averaged
    over space and stages. Symmetric; zero iff the feature maps agree.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    extractor = extractor if extractor is not None else _default_extractor(a.dtype)
    if a.shape[-2] < MIN_INPUT or a.shape[-1] < MIN_INPUT:
        size = (max(a.shape[-2], MIN_INPUT), max(a.shape[-1], MIN_INPUT))
        a = F.interpolate(a, size=size, mode="bilinear", align_corners=False)
        b = F.interpolate(b, size=size, mode="bilinear", align_corners=False)
    feats_a = extractor(a)
    feats_b = extractor(b)
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        diff = _unit_normalize(fa) - _unit_normalize(fb)
        total = total + diff.pow(2).sum(dim=1).mean()
    return total / len(feats_a)


_EXTRACTORS = {}


def _default_extractor(dtype) -> RandomConvFeatures:
    key = str(dtype)
    if key not in _EXTRACTORS:
        _EXTRACTORS[key] = RandomConvFeatures(seed=0).to(dtype)
    return _EXTRACTORS[key]
