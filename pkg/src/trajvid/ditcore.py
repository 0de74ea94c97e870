"""Toy diffusion transformer over patchified video latents.

Velocity parameterization: with x_t = sqrt(a) x0 + sqrt(1 - a) eps the
network predicts v and the clean latent is recovered as
sqrt(a) x_t - sqrt(1 - a) v.  The loss is the MSE between x0 and that
reconstruction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, StepError, ValidationError, WeightsError

# -- velocity-parameterized diffusion math ---------------------------------


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def _ab(alpha_bar, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(alpha_bar, dtype=like.dtype)


def add_noise(x0: torch.Tensor, eps: torch.Tensor, alpha_bar) -> torch.Tensor:
    _check_same(x0, eps, "add_noise")
    a = _ab(alpha_bar, x0)
    return a.sqrt() * x0 + (1 - a).sqrt() * eps


def v_target(x0: torch.Tensor, eps: torch.Tensor, alpha_bar) -> torch.Tensor:
    _check_same(x0, eps, "v_target")
    a = _ab(alpha_bar, x0)
    return a.sqrt() * eps - (1 - a).sqrt() * x0


def predict_x0(x_t: torch.Tensor, v: torch.Tensor, alpha_bar) -> torch.Tensor:
    a = _ab(alpha_bar, x_t)
    return a.sqrt() * x_t - (1 - a).sqrt() * v


def predict_eps(x_t: torch.Tensor, v: torch.Tensor, alpha_bar) -> torch.Tensor:
    a = _ab(alpha_bar, x_t)
    return (1 - a).sqrt() * x_t + a.sqrt() * v


def diffusion_loss(x0: torch.Tensor, x_t: torch.Tensor, v_pred: torch.Tensor, alpha_bar) -> torch.Tensor:
    _check_same(x0, x_t, "diffusion_loss")
    _check_same(x0, v_pred, "diffusion_loss")
    return (x0 - predict_x0(x_t, v_pred, alpha_bar)).pow(2).mean()


class NoiseSchedule:
    """Cosine cumulative-alpha schedule indexed by integer step 0..n_steps."""

    def __init__(self, n_steps: int = 1000, offset: float = 0.008, max_beta: float = 0.999):
        if n_steps < 1:
            raise ValidationError("n_steps must be >= 1")
        self.n_steps = n_steps
        s = torch.arange(n_steps + 1, dtype=torch.float64) / n_steps
        f = torch.cos((s + offset) / (1 + offset) * math.pi / 2) ** 2
        raw = f / f[0]
        betas = (1 - raw[1:] / raw[:-1]).clamp(max=max_beta)
        self.alphas = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1 - betas, 0)])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= int(t) <= self.n_steps or int(t) != t:
            raise StepError(f"step {t} outside [0, {self.n_steps}]")
        return float(self.alphas[int(t)])

    def add_noise(self, x0, eps, t):
        return add_noise(x0, eps, self.alpha_bar(t))

    def v_target(self, x0, eps, t):
        return v_target(x0, eps, self.alpha_bar(t))

    def loss(self, x0, x_t, v_pred, t):
        return diffusion_loss(x0, x_t, v_pred, self.alpha_bar(t))

    def inference_steps(self, n: int) -> list[int]:
        """n+1 descending step indices from n_steps down to 0."""
        if n < 1:
            raise ValidationError("need at least one sampling step")
        grid = torch.linspace(self.n_steps, 0, n + 1, dtype=torch.float64).round().long()
        return grid.tolist()


# -- model ------------------------------------------------------------------


@dataclass
class DitConfig:
    hidden_dim: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    patch: int = 2
    latent_channels: int = 16
    image_channels: int = 16
    mlp_ratio: int = 4
    freq_dim: int = 64
    cond_dropout: float = 0.1

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValidationError("hidden_dim must be divisible by n_heads")
        if self.patch != 2:
            raise ValidationError("patch size is fixed at 2")
        if self.n_blocks < 1:
            raise ValidationError("need at least one block")

    @property
    def in_channels(self) -> int:
        return self.image_channels + self.latent_channels


@dataclass
class DenoiserOutput:
    v: torch.Tensor  # (T', H', W', 16)
    features: list[torch.Tensor] = field(default_factory=list)  # each (T', H'/2, W'/2, hidden)


def timestep_embedding(t, dim: int, max_period: float = 10000.0, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = float(t) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)])
    if dim % 2:
        emb = torch.cat([emb, emb.new_zeros(1)])
    return emb.to(dtype)


def grid_position_embedding(grid: tuple[int, int, int], dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sum of per-axis sinusoidal embeddings for a (T, H, W) token grid -> (N, dim)."""
    tt, hh, ww = torch.meshgrid(*(torch.arange(n) for n in grid), indexing="ij")
    out = torch.zeros(tt.numel(), dim, dtype=torch.float64)
    for k, axis in enumerate((tt, hh, ww)):
        pos = axis.reshape(-1, 1).to(torch.float64)
        half = dim // 2
        freqs = torch.exp(-math.log(100.0 + 37.0 * k) * torch.arange(half, dtype=torch.float64) / half)
        out[:, :half] += torch.sin(pos * freqs)
        out[:, half:2 * half] += torch.cos(pos * freqs)
    return out.to(dtype)


def patchify(z: torch.Tensor, p: int) -> tuple[torch.Tensor, tuple[int, int, int]]:
    """(T, H, W, C) -> tokens (T*H/p*W/p, C*p*p) with channel-major columns."""
    T, H, W, C = z.shape
    if H % p or W % p:
        raise ShapeError(f"latent spatial dims {(H, W)} not divisible by patch {p}")
    x = z.reshape(T, H // p, p, W // p, p, C).permute(0, 1, 3, 5, 2, 4)
    grid = (T, H // p, W // p)
    return x.reshape(T * (H // p) * (W // p), C * p * p), grid


def unpatchify(tokens: torch.Tensor, grid: tuple[int, int, int], p: int, channels: int) -> torch.Tensor:
    T, h, w = grid
    x = tokens.reshape(T, h, w, channels, p, p).permute(0, 1, 4, 2, 5, 3)
    return x.reshape(T, h * p, w * p, channels)


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class Attention(nn.Module):
    """Full self-attention over all tokens of the clip."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_probs: bool = False):
        n, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).reshape(n, 3, self.n_heads, hd).permute(1, 2, 0, 3)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (probs @ v).transpose(0, 1).reshape(n, d)
        out = self.proj(out)
        return (out, probs) if return_probs else out


class DiTBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(approximate="tanh"),
                                 nn.Linear(mlp_ratio * dim, dim))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1 * self.attn(modulate(self.norm1(x), sh1, sc1))
        return x + g2 * self.mlp(modulate(self.norm2(x), sh2, sc2))


class TrajDiT(nn.Module):
    """Base image-to-video denoiser; input channels are [image 16 | noised video 16]."""

    def __init__(self, cfg: DitConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DitConfig()
        d, p = cfg.hidden_dim, cfg.patch
        self.patch_embed = nn.Linear(cfg.in_channels * p * p, d)
        self.t_embed = nn.Sequential(nn.Linear(cfg.freq_dim, d), nn.SiLU(), nn.Linear(d, d))
        # learned global condition (stand-in for the text prompt) and its null twin for CFG
        self.cond_embed = nn.Parameter(torch.randn(d) * 0.02)
        self.null_embed = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(DiTBlock(d, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_blocks))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.final_proj = nn.Linear(d, p * p * cfg.latent_channels)

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    def conditioning(self, t, unconditional: bool = False) -> torch.Tensor:
        temb = self.t_embed(timestep_embedding(t, self.cfg.freq_dim, dtype=self.dtype))
        return temb + (self.null_embed if unconditional else self.cond_embed)

    def tokens(self, z: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int, int]]:
        tok, grid = patchify(z.to(self.dtype), self.cfg.patch)
        return tok, grid

    def token_grid_shape(self, grid) -> tuple[int, int, int, int]:
        return (*grid, self.cfg.hidden_dim)

    def forward(self, z_in: torch.Tensor, t, control_residuals=None, unconditional: bool = False,
                cond: torch.Tensor | None = None) -> DenoiserOutput:
        if z_in.ndim != 4 or z_in.shape[-1] != self.cfg.in_channels:
            raise ShapeError(f"denoiser input must be (T', H', W', {self.cfg.in_channels}), got {tuple(z_in.shape)}")
        tok, grid = self.tokens(z_in)
        feat_shape = self.token_grid_shape(grid)
        if control_residuals is not None:
            if len(control_residuals) != len(self.blocks):
                raise ShapeError(f"expected {len(self.blocks)} residuals, got {len(control_residuals)}")
            for i, r in enumerate(control_residuals):
                if tuple(r.shape) != feat_shape:
                    raise ShapeError(f"residual {i} has shape {tuple(r.shape)}, expected {feat_shape}")
        c = self.conditioning(t, unconditional) if cond is None else cond
        h = self.patch_embed(tok) + grid_position_embedding(grid, self.cfg.hidden_dim, self.dtype)
        features = []
        for i, block in enumerate(self.blocks):
            h = block(h, c)
            if control_residuals is not None:
                h = h + control_residuals[i].reshape(h.shape).to(h.dtype)
            features.append(h.reshape(feat_shape))
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        out = self.final_proj(modulate(self.final_norm(h), shift, scale))
        v = unpatchify(out, grid, self.cfg.patch, self.cfg.latent_channels)
        return DenoiserOutput(v, features)


def denoiser_forward(base: TrajDiT, z_in: torch.Tensor, t, control_residuals=None,
                     unconditional: bool = False) -> DenoiserOutput:
    return base(z_in, t, control_residuals=control_residuals, unconditional=unconditional)


# -- sampling ---------------------------------------------------------------


@dataclass
class SampleResult:
    latent: torch.Tensor  # denoised video latent (T', H', W', 16)
    features: list[torch.Tensor]  # conditional-pass features at the last step


@torch.no_grad()
def sample_latent(model, image_latent, trajectory_latent, n_steps: int = 50, guidance: float = 6.0,
                  control_scale: float = 1.0, seed: int = 0, require_trained: bool = True) -> SampleResult:
    """DDIM sampling with classifier-free guidance ``u + g * (c - u)`` on v.

    ``model`` is a :class:`trajvid.model.TrajVideoModel` (anything exposing
    ``predict``, ``schedule`` and ``trained``).  ``image_latent`` is the
    single-slot image latent; it is zero-padded to the trajectory length.
    """
    from .latent3d import LatentBlock, pad_image_latent

    if model is None:
        raise WeightsError("no model weights supplied")
    if require_trained and not getattr(model, "trained", False):
        raise WeightsError("model has not been trained or loaded from a checkpoint")
    z_traj = trajectory_latent.data if isinstance(trajectory_latent, LatentBlock) else trajectory_latent
    zi = image_latent if isinstance(image_latent, LatentBlock) else LatentBlock(image_latent, "image")
    z_img = pad_image_latent(zi, z_traj.shape[0]).data
    if z_img.shape[:3] != z_traj.shape[:3]:
        raise ShapeError(f"image latent {tuple(z_img.shape)} and trajectory latent {tuple(z_traj.shape)} disagree")
    sched = model.schedule
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(z_traj.shape, generator=gen, dtype=torch.float64).to(z_traj.dtype)
    steps = sched.inference_steps(n_steps)
    features: list[torch.Tensor] = []
    for t, t_prev in zip(steps[:-1], steps[1:]):
        cond = model.predict(z_img, x, z_traj, t, control_scale=control_scale)
        v = cond.v
        features = cond.features
        if guidance != 1.0:
            unc = model.predict(z_img, x, z_traj, t, control_scale=control_scale, unconditional=True)
            v = unc.v + guidance * (cond.v - unc.v)
        a, a_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
        x0_hat = predict_x0(x, v, a)
        eps_hat = predict_eps(x, v, a)
        x = math.sqrt(a_prev) * x0_hat + math.sqrt(1 - a_prev) * eps_hat
    return SampleResult(x, features)


def sample(model, image_latent, trajectory_latent, n_steps: int = 50, guidance: float = 6.0,
           control_scale: float = 1.0, seed: int = 0, require_trained: bool = True) -> torch.Tensor:
    """Generate a (T, H, W, 3) clip in [0, 1]."""
    res = sample_latent(model, image_latent, trajectory_latent, n_steps, guidance, control_scale, seed,
                        require_trained)
    with torch.no_grad():
        return model.codec.decode(res.latent)
