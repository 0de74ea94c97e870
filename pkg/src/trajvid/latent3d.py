"""Toy 3D variational autoencoder with 4x temporal / 8x spatial compression.

Public tensors are unbatched and channels-last: a clip is (T, H, W, 3) and a
latent is (T/4, H/8, W/8, 16).  Internally modules run batched NCTHW.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError

LATENT_KINDS = ("image", "video", "trajectory", "mask", "segment", "noise")


@dataclass
class LatentBlock:
    data: torch.Tensor  # (T', H', W', C)
    kind: str = "video"

    def __post_init__(self):
        if self.kind not in LATENT_KINDS:
            raise ValidationError(f"unknown latent kind {self.kind!r}")
        if self.data.ndim != 4 or min(self.data.shape) <= 0:
            raise ShapeError(f"latent must be a non-empty 4D tensor, got {tuple(self.data.shape)}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


@dataclass
class CodecConfig:
    temporal_factor: int = 4
    spatial_factor: int = 8
    latent_channels: int = 16
    hidden_widths: list[int] = field(default_factory=lambda: [64, 64])
    kl_weight: float = 1e-6

    def __post_init__(self):
        if (self.temporal_factor, self.spatial_factor, self.latent_channels) != (4, 8, 16):
            raise ValidationError("codec factors are fixed at temporal 4, spatial 8, 16 channels")
        if not self.hidden_widths:
            raise ValidationError("hidden_widths must be nonempty")


def _as_video_tensor(v, dtype) -> torch.Tensor:
    x = v if isinstance(v, torch.Tensor) else torch.from_numpy(np.asarray(v, dtype=np.float32))
    return x.to(dtype)


def check_video_shape(shape, cfg: CodecConfig | None = None) -> None:
    cfg = cfg or CodecConfig()
    if len(shape) != 4 or shape[-1] != 3:
        raise ShapeError(f"video must be (T, H, W, 3), got {tuple(shape)}")
    for axis, n, f in (("T", shape[0], cfg.temporal_factor), ("H", shape[1], cfg.spatial_factor),
                       ("W", shape[2], cfg.spatial_factor)):
        if n <= 0 or n % f:
            raise ShapeError(f"axis {axis}={n} is not a positive multiple of {f}")


class VideoCodec(nn.Module):
    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or CodecConfig()
        kt, ks, zc = cfg.temporal_factor, cfg.spatial_factor, cfg.latent_channels
        w = cfg.hidden_widths
        patch = (kt, ks, ks)
        enc = [nn.Conv3d(3, w[0], patch, stride=patch), nn.SiLU()]
        for a, b in zip(w, w[1:]):
            enc += [nn.Conv3d(a, b, (1, 3, 3), padding=(0, 1, 1)), nn.SiLU()]
        enc.append(nn.Conv3d(w[-1], 2 * zc, 1))
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv3d(zc, w[-1], 1), nn.SiLU()]
        for a, b in zip(w[::-1], w[::-1][1:]):
            dec += [nn.Conv3d(a, b, (1, 3, 3), padding=(0, 1, 1)), nn.SiLU()]
        dec.append(nn.ConvTranspose3d(w[0], 3, patch, stride=patch))
        self.decoder = nn.Sequential(*dec)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    # batched NCTHW helpers
    def posterior(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def reconstruction_loss(self, video, generator: torch.Generator | None = None) -> torch.Tensor:
        """MSE reconstruction plus a small KL term; uses the posterior mean when no generator."""
        x = _as_video_tensor(video, self.dtype)
        check_video_shape(x.shape, self.cfg)
        x = x.permute(3, 0, 1, 2).unsqueeze(0)
        mean, logvar = self.posterior(x)
        z = mean
        if generator is not None:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            z = mean + torch.exp(0.5 * logvar) * noise
        recon = self.decoder(z)
        kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()
        return F.mse_loss(recon, x) + self.cfg.kl_weight * kl

    def encode(self, video, kind: str = "video") -> LatentBlock:
        x = _as_video_tensor(video, self.dtype)
        check_video_shape(x.shape, self.cfg)
        mean, _ = self.posterior(x.permute(3, 0, 1, 2).unsqueeze(0))
        return LatentBlock(mean[0].permute(1, 2, 3, 0), kind)

    def encode_image(self, image) -> LatentBlock:
        """Encode one (H, W, 3) frame as a single latent slot by repeating it 4 times."""
        x = _as_video_tensor(image, self.dtype)
        if x.ndim != 3:
            raise ShapeError(f"image must be (H, W, 3), got {tuple(x.shape)}")
        clip = x.unsqueeze(0).expand(self.cfg.temporal_factor, *x.shape)
        return self.encode(clip, kind="image")

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        """Unclamped decode of an unbatched channels-last latent."""
        if z.ndim != 4 or z.shape[-1] != self.cfg.latent_channels:
            raise ShapeError(f"latent must be (T', H', W', {self.cfg.latent_channels}), got {tuple(z.shape)}")
        out = self.decoder(z.to(self.dtype).permute(3, 0, 1, 2).unsqueeze(0))
        return out[0].permute(1, 2, 3, 0)

    def decode(self, z) -> torch.Tensor:
        if isinstance(z, LatentBlock):
            if z.kind not in ("video", "segment"):
                raise ValidationError(f"cannot decode a {z.kind!r} latent")
            z = z.data
        return self.decode_raw(z).clamp(0.0, 1.0)


def pad_image_latent(zi: LatentBlock, target_t: int) -> LatentBlock:
    """Place the single image slot at t=0 and zero-fill the remaining slots."""
    if target_t < 1:
        raise ShapeError(f"target temporal extent must be >= 1, got {target_t}")
    if zi.data.shape[0] != 1:
        raise ShapeError(f"image latent must have temporal extent 1, got {zi.data.shape[0]}")
    pad = zi.data.new_zeros((target_t - 1, *zi.data.shape[1:]))
    return LatentBlock(torch.cat([zi.data, pad], dim=0), "image")


def concat_channels(a, b, kind: str | None = None) -> LatentBlock:
    da = a.data if isinstance(a, LatentBlock) else a
    db = b.data if isinstance(b, LatentBlock) else b
    if da.shape[:3] != db.shape[:3]:
        raise ShapeError(f"cannot concatenate latents {tuple(da.shape)} and {tuple(db.shape)}")
    if kind is None:
        kind = a.kind if isinstance(a, LatentBlock) else "video"
    return LatentBlock(torch.cat([da, db], dim=-1), kind)


def fit_codec(codec: VideoCodec, clips, steps: int, lr: float = 3e-3, seed: int = 0) -> list[float]:
    """Train the codec on a list of clips by cycling through them; returns per-step losses."""
    if not len(clips):
        raise ValidationError("need at least one clip to fit the codec")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    losses = []
    codec.train()
    for step in range(steps):
        loss = codec.reconstruction_loss(clips[step % len(clips)], generator=gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    codec.eval()
    return losses
