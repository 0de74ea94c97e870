"""Generation helpers tying the codec, sampler and trajectory rendering together."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .datapipe import TripletRecord
from .errors import WeightsError
from .ditcore import sample_latent
from .model import TrajVideoModel
from .stages import make_condition, record_clip
from .trajgeo import TrajectorySet


def condition_latents(model: TrajVideoModel, image, ts: TrajectorySet, kind: str = "mask", sparsity_k: int = 6):
    with torch.no_grad():
        zi = model.codec.encode_image(np.asarray(image, dtype=np.float32))
        z_traj = model.codec.encode(make_condition(ts, kind, sparsity_k), kind="trajectory")
    return zi, z_traj


def generate_clip(model: TrajVideoModel, image, ts: TrajectorySet, kind: str = "mask", sparsity_k: int = 6,
                  n_steps: int = 50, guidance: float = 6.0, control_scale: float = 1.0,
                  seed: int = 0) -> np.ndarray:
    """Animate ``image`` (H, W, 3) along ``ts``; returns a (T, H, W, 3) clip in [0, 1]."""
    zi, z_traj = condition_latents(model, image, ts, kind, sparsity_k)
    res = sample_latent(model, zi, z_traj, n_steps, guidance, control_scale, seed)
    with torch.no_grad():
        return model.codec.decode(res.latent).numpy()


def generate_for_records(model: TrajVideoModel, records: Sequence[TripletRecord], kind: str = "mask",
                         sparsity_k: int = 6, n_steps: int = 50, guidance: float = 6.0,
                         control_scale: float = 1.0, seed: int = 0) -> dict[str, np.ndarray]:
    """One clip per record from its first frame and trajectory; seeds offset by record position."""
    out = {}
    for i, rec in enumerate(records):
        k = min([sparsity_k] + [len(tr.frames) for tr in rec.trajectory.tracks])
        out[rec.video_ref] = generate_clip(model, record_clip(rec)[0], rec.trajectory, kind, k,
                                           n_steps, guidance, control_scale, seed + i)
    return out


def latent_segment(model: TrajVideoModel, image, ts: TrajectorySet, kind: str = "sparse_box",
                   sparsity_k: int = 6, n_steps: int = 50, guidance: float = 6.0,
                   control_scale: float = 1.0, seed: int = 0) -> np.ndarray:
    """Decode the segment head's latent mask from the final sampling step into pixels."""
    if model.seghead is None:
        raise WeightsError("model has no segment head (train stage 2 or 3 first)")
    zi, z_traj = condition_latents(model, image, ts, kind, sparsity_k)
    res = sample_latent(model, zi, z_traj, n_steps, guidance, control_scale, seed)
    with torch.no_grad():
        z_seg = model.seghead(res.features)
        return model.codec.decode(z_seg).numpy()
