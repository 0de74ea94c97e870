import pytest
import torch

from trajvid.ditcore import TrajDiT
from trajvid.errors import WeightsError
from trajvid.stages import StageConfig, build_scratch_model, train_stage
from trajvid.trajcontrol import control_forward, full_forward, init_from_base

from conftest import small_config


def _inputs(seed, T=2, H=4, W=6):
    g = torch.Generator().manual_seed(seed)
    mk = lambda: torch.randn(T, H, W, 16, generator=g)  # noqa: E731
    return mk(), mk(), mk(), int(torch.randint(0, 1001, (1,), generator=g))


def test_branch_copies_base(small_model):
    base, branch = small_model.base, small_model.control
    assert len(branch) == len(base.blocks) == len(branch.zero_projs)
    for (k, a), b in zip(branch.blocks[0].state_dict().items(), base.blocks[0].state_dict().values()):
        assert torch.equal(a, b), k


def test_fresh_residuals_are_zero(small_model):
    z_img, x_t, z_traj, t = _inputs(0)
    res = control_forward(small_model.control, small_model.base, z_traj, x_t, z_img, t)
    assert len(res) == len(small_model.base.blocks)
    assert all(r.shape == (2, 2, 3, 32) and not r.any() for r in res)


def test_zero_init_identity(small_model):
    base, branch = small_model.base, small_model.control
    with torch.no_grad():
        for seed in range(5):
            z_img, x_t, z_traj, t = _inputs(seed)
            ref = base(torch.cat([z_img, x_t], -1), t).v
            out = full_forward(base, branch, z_img, x_t, z_traj, t).v
            assert (out - ref).abs().max() < 1e-6
            off = full_forward(base, branch, z_img, x_t, z_traj, t, control_scale=0.0).v
            assert torch.equal(off, ref)


def test_init_rejects_bad_base():
    base = TrajDiT(small_config().dit)
    with torch.no_grad():
        base.blocks[0].attn.qkv.weight[0, 0] = float("nan")
    with pytest.raises(WeightsError):
        init_from_base(base)


def test_training_moves_residuals_and_freezes_base(kept_records):
    cfg = StageConfig(stage_id=1, max_steps=15, model=small_config(), seed=0)
    model = build_scratch_model(cfg, kept_records[:1])
    base_before = {k: v.clone() for k, v in model.base.state_dict().items()}
    train_stage(cfg, kept_records[:1], model=model)
    for k, v in model.base.state_dict().items():
        assert torch.equal(v, base_before[k]), k
    z_img, x_t, _, t = _inputs(1)
    with torch.no_grad():
        zb = model.codec.encode(torch.zeros(8, 32, 48, 3), "trajectory").data
        zf = model.codec.encode(torch.ones(8, 32, 48, 3), "trajectory").data
        r_black = control_forward(model.control, model.base, zb, x_t, z_img, t)
        r_full = control_forward(model.control, model.base, zf, x_t, z_img, t)
    diff = sum(float((a - b).pow(2).sum()) for a, b in zip(r_black, r_full))
    assert diff > 0
