"""Latent segmentation head and the combined training loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericsError, ShapeError, ValidationError

SEG_LAMBDA = 0.5


class SegHead(nn.Module):
    """FPN-style head: per-block 3x3 conv to 64 ch, concat, fuse, 2x upsample, project to 16.

    Inputs are the per-block token grids (T', H/16, W/16, hidden); the output is a
    latent-space mask (T', H/8, W/8, 16).  Biases start at zero so all-zero
    features map to an all-zero output.
    """

    def __init__(self, hidden_dim: int, n_blocks: int, width: int = 64, out_channels: int = 16):
        super().__init__()
        self.n_blocks = n_blocks
        self.hidden_dim = hidden_dim
        k = (1, 3, 3)
        pad = (0, 1, 1)
        self.per_block_convs = nn.ModuleList(nn.Conv3d(hidden_dim, width, k, padding=pad)
                                             for _ in range(n_blocks))
        self.fuse_conv = nn.Conv3d(width * n_blocks, width, k, padding=pad)
        self.up_conv = nn.Conv3d(width, width, k, padding=pad)
        self.out_proj = nn.Conv3d(width, out_channels, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.zeros_(m.bias)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        if len(features) != self.n_blocks:
            raise ShapeError(f"expected {self.n_blocks} feature maps, got {len(features)}")
        ref = tuple(features[0].shape)
        for i, f in enumerate(features):
            if f.ndim != 4 or tuple(f.shape) != ref or f.shape[-1] != self.hidden_dim:
                raise ShapeError(f"feature {i} has shape {tuple(f.shape)}; expected (T', h, w, {self.hidden_dim})")
        dtype = self.out_proj.weight.dtype
        pyramid = [F.silu(conv(f.to(dtype).permute(3, 0, 1, 2).unsqueeze(0)))
                   for conv, f in zip(self.per_block_convs, features)]
        x = F.silu(self.fuse_conv(torch.cat(pyramid, dim=1)))
        x = F.interpolate(x, scale_factor=(1, 2, 2), mode="nearest")
        x = F.silu(self.up_conv(x))
        return self.out_proj(x)[0].permute(1, 2, 3, 0)


def seg_forward(head: SegHead, features: list[torch.Tensor]) -> torch.Tensor:
    return head(features)


def seg_loss(z_segment: torch.Tensor, z_mask: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance normalized by element count."""
    if z_segment.shape != z_mask.shape:
        raise ShapeError(f"seg_loss: shapes {tuple(z_segment.shape)} and {tuple(z_mask.shape)} differ")
    return (z_segment - z_mask.to(z_segment.dtype)).pow(2).mean()


@dataclass(frozen=True)
class LossWeights:
    lambda_seg: float = 0.0
    diffusion_weight: float = 1.0

    @classmethod
    def for_stage(cls, stage_id: int) -> "LossWeights":
        if stage_id not in (1, 2, 3):
            raise ValidationError(f"unknown stage {stage_id}")
        return cls(0.0 if stage_id == 1 else SEG_LAMBDA)


def total_loss(l_diff, l_seg, weights: LossWeights):
    for name, val in (("diffusion", l_diff), ("segment", l_seg)):
        nan = bool(torch.isnan(val).any()) if isinstance(val, torch.Tensor) else math.isnan(val)
        if nan:
            raise NumericsError(f"{name} loss is NaN")
    return weights.diffusion_weight * l_diff + weights.lambda_seg * l_seg
