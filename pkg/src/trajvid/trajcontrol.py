"""Trajectory control branch: a trainable copy of the base blocks whose outputs
reach the base model through zero-initialized 1x1 projections."""
from __future__ import annotations

import copy

import torch
import torch.nn as nn

from .ditcore import DenoiserOutput, TrajDiT, grid_position_embedding
from .errors import ShapeError, WeightsError

TRAJ_CHANNELS = 16


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ControlBranch(nn.Module):
    """Consumes [image 16 | noised video 16 | trajectory 16] latents."""

    def __init__(self, base: TrajDiT):
        super().__init__()
        cfg = base.cfg
        d, p = cfg.hidden_dim, cfg.patch
        self.patch = p
        self.base_in = cfg.in_channels * p * p
        self.input_adapter = nn.Linear((cfg.in_channels + TRAJ_CHANNELS) * p * p, d)
        self.blocks = nn.ModuleList(copy.deepcopy(b) for b in base.blocks)
        self.zero_projs = nn.ModuleList(zero_module(nn.Linear(d, d)) for _ in base.blocks)

    def __len__(self) -> int:
        return len(self.blocks)


def init_from_base(base: TrajDiT) -> ControlBranch:
    """Copy the base blocks; trajectory inputs and output projections start at zero."""
    state = base.state_dict()
    if not state or any(not torch.isfinite(v).all() for v in state.values()):
        raise WeightsError("base weights are missing or non-finite")
    branch = ControlBranch(base).to(base.dtype)
    with torch.no_grad():
        w = branch.input_adapter.weight
        w.zero_()
        # columns are channel-major, so the first in_channels*p*p match the base layout
        w[:, :branch.base_in].copy_(base.patch_embed.weight)
        branch.input_adapter.bias.copy_(base.patch_embed.bias)
        for mine, theirs in zip(branch.blocks, base.blocks):
            mine.load_state_dict(theirs.state_dict())
    return branch


def control_forward(branch: ControlBranch, base: TrajDiT, z_traj: torch.Tensor, x_t: torch.Tensor,
                    z_image_padded: torch.Tensor, t, unconditional: bool = False,
                    cond: torch.Tensor | None = None) -> list[torch.Tensor]:
    """Per-block residuals shaped like the base token grid (T', H'/2, W'/2, hidden)."""
    if not (z_traj.shape[:3] == x_t.shape[:3] == z_image_padded.shape[:3]):
        raise ShapeError(f"latent extents disagree: trajectory {tuple(z_traj.shape)}, "
                         f"video {tuple(x_t.shape)}, image {tuple(z_image_padded.shape)}")
    if z_traj.shape[-1] != TRAJ_CHANNELS:
        raise ShapeError(f"trajectory latent must have {TRAJ_CHANNELS} channels")
    z = torch.cat([z_image_padded, x_t, z_traj], dim=-1)
    tok, grid = base.tokens(z)
    c = base.conditioning(t, unconditional) if cond is None else cond
    h = branch.input_adapter(tok) + grid_position_embedding(grid, base.cfg.hidden_dim, base.dtype)
    shape = base.token_grid_shape(grid)
    residuals = []
    for block, proj in zip(branch.blocks, branch.zero_projs):
        h = block(h, c)
        residuals.append(proj(h).reshape(shape))
    return residuals


def full_forward(base: TrajDiT, branch: ControlBranch | None, z_image_padded: torch.Tensor, x_t: torch.Tensor,
                 z_traj: torch.Tensor | None, t, control_scale: float = 1.0,
                 unconditional: bool = False) -> DenoiserOutput:
    """Base forward with ``control_scale`` times the branch residuals injected per block."""
    if control_scale < 0:
        raise ValueError("control_scale must be >= 0")
    z_in = torch.cat([z_image_padded, x_t], dim=-1)
    if branch is None or z_traj is None or control_scale == 0:
        return base(z_in, t, unconditional=unconditional)
    c = base.conditioning(t, unconditional)
    res = control_forward(branch, base, z_traj, x_t, z_image_padded, t, cond=c)
    if control_scale != 1.0:
        res = [control_scale * r for r in res]
    return base(z_in, t, control_residuals=res, cond=c)
