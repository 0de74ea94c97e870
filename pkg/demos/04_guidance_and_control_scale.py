"""How guidance and the control-branch weight change a sample.

Uses a freshly built model whose control projections are perturbed so the
branch has a visible effect; no training needed.
"""
import numpy as np
import torch

from trajvid.ditcore import sample_latent
from trajvid.model import TrajVideoModel
from trajvid.synthetic import random_clip
from trajvid.stages import make_condition
from trajvid.datapipe import curate
from trajvid.synthetic import stub_clients

clip = random_clip(np.random.default_rng(0), 2)
rec = curate(clip.video, clip.caption, stub_clients([clip]))

model = TrajVideoModel(seed=0)
model.attach_control()
with torch.no_grad():
    for p in model.control.zero_projs.parameters():
        p.normal_(0, 0.02)
model.trained = True  # skip the checkpoint guard for this illustration

with torch.no_grad():
    zi = model.codec.encode_image(clip.video[0])
    zt = model.codec.encode(make_condition(rec.trajectory, "box"), "trajectory")

ref = sample_latent(model, zi, zt, n_steps=10, seed=3).latent
for guidance in (1.0, 3.0, 6.0):
    for scale in (0.0, 1.0):
        z = sample_latent(model, zi, zt, n_steps=10, guidance=guidance, control_scale=scale, seed=3).latent
        print(f"guidance={guidance:<4} control_scale={scale:<4} mean |z - default| = {(z - ref).abs().mean():.4f}")
