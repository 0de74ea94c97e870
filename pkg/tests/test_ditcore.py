import math

import numpy as np
import pytest
import torch

from trajvid.ditcore import (Attention, DitConfig, NoiseSchedule, TrajDiT, add_noise, denoiser_forward,
                             diffusion_loss, sample_latent, v_target)
from trajvid.errors import ShapeError, StepError, WeightsError
from trajvid.model import TrajVideoModel

from conftest import small_config

S = lambda x: torch.tensor([x], dtype=torch.float64)  # noqa: E731


def test_add_noise_examples():
    sched = NoiseSchedule()
    x0, eps = torch.randn(2, 3, 4, 16), torch.randn(2, 3, 4, 16)
    assert sched.alpha_bar(0) == 1.0
    assert torch.equal(sched.add_noise(x0, eps, 0), x0)
    assert torch.allclose(add_noise(x0, eps, 0.0), eps)
    assert add_noise(S(2.0), S(4.0), 0.25).item() == pytest.approx(0.5 * 2 + math.sqrt(0.75) * 4, abs=1e-12)
    assert add_noise(S(2.0), S(4.0), 0.25).item() == pytest.approx(4.4641, abs=1e-4)


def test_v_target_examples():
    x0, eps = torch.randn(5, 16, dtype=torch.float64), torch.randn(5, 16, dtype=torch.float64)
    assert torch.equal(v_target(x0, eps, 1.0), eps)
    assert v_target(S(2.0), S(4.0), 0.25).item() == pytest.approx(0.2679, abs=1e-4)
    for ab in (0.01, 0.3, 0.97):
        recon = math.sqrt(ab) * add_noise(x0, eps, ab) - math.sqrt(1 - ab) * v_target(x0, eps, ab)
        assert torch.allclose(recon, x0, atol=1e-6)


def test_diffusion_loss_examples():
    g = torch.Generator().manual_seed(0)
    for _ in range(10):
        x0 = torch.randn(2, 2, 2, 16, generator=g, dtype=torch.float64)
        eps = torch.randn(2, 2, 2, 16, generator=g, dtype=torch.float64)
        ab = float(torch.rand(1, generator=g))
        x_t = add_noise(x0, eps, ab)
        assert diffusion_loss(x0, x_t, v_target(x0, eps, ab), ab).item() < 1e-10
    x0 = torch.randn(3, 16, dtype=torch.float64)
    assert diffusion_loss(x0, x0, torch.randn(3, 16, dtype=torch.float64), 1.0).item() == 0.0
    val = diffusion_loss(S(2.0), S(4.4641), S(0.0), 0.25).item()
    assert val == pytest.approx((2 - 0.5 * 4.4641) ** 2, abs=1e-12)
    with pytest.raises(ShapeError):
        diffusion_loss(torch.zeros(2), torch.zeros(3), torch.zeros(2), 0.5)


def test_schedule_properties():
    sched = NoiseSchedule(1000)
    a = sched.alphas
    assert a[0] == 1 and (a[1:] < a[:-1]).all() and a[-1] >= 0
    steps = sched.inference_steps(50)
    assert len(steps) == 51 and steps[0] == 1000 and steps[-1] == 0
    with pytest.raises(StepError):
        sched.alpha_bar(1001)
    with pytest.raises(StepError):
        sched.alpha_bar(-1)


def _base(blocks=2, dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    return TrajDiT(DitConfig(hidden_dim=32, n_blocks=blocks, n_heads=2, freq_dim=32)).to(dtype)


def test_features_shape_and_zero_residuals():
    base = _base(blocks=3)
    z = torch.randn(2, 4, 6, 32)
    out = denoiser_forward(base, z, 500)
    assert out.v.shape == (2, 4, 6, 16)
    assert len(out.features) == 3 and all(f.shape == (2, 2, 3, 32) for f in out.features)
    zeros = [torch.zeros(2, 2, 3, 32) for _ in range(3)]
    out0 = denoiser_forward(base, z, 500, control_residuals=zeros)
    assert torch.equal(out.v, out0.v)
    again = denoiser_forward(base, z, 500)
    assert torch.equal(out.v, again.v)


def test_residual_shape_validation():
    base = _base()
    with pytest.raises(ShapeError):
        base(torch.randn(2, 4, 6, 32), 10, control_residuals=[torch.zeros(2, 2, 3, 32)])
    with pytest.raises(ShapeError):
        base(torch.randn(2, 4, 6, 32), 10, control_residuals=[torch.zeros(2, 2, 2, 32)] * 2)
    with pytest.raises(ShapeError):
        base(torch.randn(2, 4, 6, 31), 10)


def test_residual_locality():
    base = _base(blocks=3)
    z = torch.randn(1, 4, 4, 32)
    res = [torch.randn(1, 2, 2, 32) for _ in range(3)]
    full = base(z, 100, control_residuals=res)
    for i in range(3):
        ablated = [r if j != i else torch.zeros_like(r) for j, r in enumerate(res)]
        out = base(z, 100, control_residuals=ablated)
        for j in range(3):
            same = torch.equal(out.features[j], full.features[j])
            assert same == (j < i)


def test_residual_additivity_single_block():
    base = _base(blocks=1)
    z = torch.randn(1, 4, 4, 32)
    r = torch.randn(1, 2, 2, 32)
    f0 = base(z, 10, control_residuals=[torch.zeros_like(r)]).features[0]
    f1 = base(z, 10, control_residuals=[r]).features[0]
    f2 = base(z, 10, control_residuals=[2 * r])
    assert torch.allclose(f2.features[0] - f0, 2 * (f1 - f0), atol=1e-5)
    assert not torch.equal(f2.v, base(z, 10, control_residuals=[r]).v)


def test_attention_rows_sum_to_one():
    torch.manual_seed(0)
    attn = Attention(32, 4)
    _, probs = attn(torch.randn(24, 32), return_probs=True)
    assert torch.allclose(probs.sum(-1), torch.ones_like(probs.sum(-1)), atol=1e-5)


def test_diffusion_loss_gradient_wrt_attention_weight():
    base = _base(blocks=1, dtype=torch.float64, seed=3)
    g = torch.Generator().manual_seed(0)
    z_img = torch.randn(1, 4, 4, 16, generator=g, dtype=torch.float64)
    x0 = torch.randn(1, 4, 4, 16, generator=g, dtype=torch.float64)
    eps = torch.randn(1, 4, 4, 16, generator=g, dtype=torch.float64)
    ab = 0.6
    x_t = add_noise(x0, eps, ab)

    def loss():
        return diffusion_loss(x0, x_t, base(torch.cat([z_img, x_t], -1), 400).v, ab)

    w = base.blocks[0].attn.qkv.weight
    (grad,) = torch.autograd.grad(loss(), w)
    flat = grad.abs().flatten()
    picks = torch.topk(flat, 5).indices.tolist()
    h = 1e-6
    for p in picks:
        idx = np.unravel_index(p, tuple(w.shape))
        with torch.no_grad():
            orig = w[idx].item()
            w[idx] = orig + h
            up = loss().item()
            w[idx] = orig - h
            down = loss().item()
            w[idx] = orig
        fd = (up - down) / (2 * h)
        assert abs(fd - grad[idx].item()) <= 1e-3 * abs(fd)


def _sampling_model():
    model = TrajVideoModel(small_config(), seed=0)
    model.attach_control()
    with torch.no_grad():
        for p in model.control.zero_projs.parameters():
            p.normal_(0, 0.05)
    model.trained = True
    return model


def test_sampling_determinism_and_guidance_identity():
    model = _sampling_model()
    zi = torch.randn(1, 2, 2, 16)
    zt = torch.randn(2, 2, 2, 16)
    a = sample_latent(model, zi, zt, n_steps=4, seed=7).latent
    b = sample_latent(model, zi, zt, n_steps=4, seed=7).latent
    assert torch.equal(a, b)
    assert not torch.equal(a, sample_latent(model, zi, zt, n_steps=4, seed=8).latent)
    with torch.no_grad():
        model.base.null_embed.copy_(model.base.cond_embed)
    g6 = sample_latent(model, zi, zt, n_steps=4, guidance=6.0, seed=1).latent
    g1 = sample_latent(model, zi, zt, n_steps=4, guidance=1.0, seed=1).latent
    assert torch.allclose(g6, g1, atol=1e-6)


def test_control_scale_zero_equals_base_sampling():
    model = _sampling_model()
    zi = torch.randn(1, 2, 2, 16)
    zt = torch.randn(2, 2, 2, 16)
    with_branch = sample_latent(model, zi, zt, n_steps=3, control_scale=0.0, seed=2).latent
    branch = model.control
    model.control = None
    base_only = sample_latent(model, zi, zt, n_steps=3, seed=2).latent
    model.control = branch
    assert torch.equal(with_branch, base_only)
    assert not torch.equal(with_branch, sample_latent(model, zi, zt, n_steps=3, seed=2).latent)


def test_sampling_requires_weights():
    with pytest.raises(WeightsError):
        sample_latent(None, torch.zeros(1, 2, 2, 16), torch.zeros(2, 2, 2, 16))
    model = TrajVideoModel(small_config())
    with pytest.raises(WeightsError):
        sample_latent(model, torch.zeros(1, 2, 2, 16), torch.zeros(2, 2, 2, 16))
