"""Sinusoidal positional encodings with optional coarse-to-fine band windowing."""

import math
from dataclasses import dataclass

import torch


def hann_window_weights(num_bands: int, alpha: float, dtype=None) -> torch.Tensor:
    """Truncated-Hann band weights w_k(alpha) = (1 - cos(pi * clamp(alpha - k, 0, 1))) / 2.

    alpha = 0 silences every band; alpha >= num_bands passes all of them.
    Weights are monotone non-decreasing in alpha per band.
    """
    k = torch.arange(num_bands, dtype=dtype or torch.get_default_dtype())
    x = (alpha - k).clamp(0.0, 1.0)
    return (1.0 - torch.cos(math.pi * x)) / 2.0


@dataclass(frozen=True)
class PositionalEncoding:
    num_bands: int
    include_input: bool = True

    @property
    def dim(self) -> int:
        return 3 * int(self.include_input) + 3 * 2 * self.num_bands

    def __call__(self, x: torch.Tensor, alpha: float = None) -> torch.Tensor:
        """Encode (..., 3) points: [x, sin(2^k pi x), cos(2^k pi x)]_{k<B},
        each band scaled by its window weight (alpha=None means all bands on)."""
        freqs = (2.0 ** torch.arange(self.num_bands, dtype=x.dtype, device=x.device)) * math.pi
        angles = x[..., None, :] * freqs[:, None]  # (..., B, 3)
        enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., B, 6)
        if alpha is not None:
            w = hann_window_weights(self.num_bands, alpha, dtype=x.dtype).to(x.device)
            enc = enc * w[:, None]
        enc = enc.flatten(-2)
        if self.include_input:
            enc = torch.cat([x, enc], dim=-1)
        return enc
