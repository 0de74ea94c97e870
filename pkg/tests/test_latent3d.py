import numpy as np
import pytest
import torch

from trajvid.errors import ShapeError, ValidationError
from trajvid.latent3d import (CodecConfig, LatentBlock, VideoCodec, check_video_shape, concat_channels, fit_codec,
                              pad_image_latent)
from trajvid.synthetic import random_clip


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return VideoCodec(CodecConfig(hidden_widths=[16, 16]))


@pytest.mark.parametrize("shape,latent", [((8, 32, 48, 3), (2, 4, 6, 16)),
                                          ((4, 8, 8, 3), (1, 1, 1, 16)),
                                          ((12, 16, 16, 3), (3, 2, 2, 16))])
def test_encode_decode_shapes(codec, shape, latent):
    v = np.zeros(shape, np.float32)
    with torch.no_grad():
        z = codec.encode(v)
        assert z.shape == latent and torch.isfinite(z.data).all()
        out = codec.decode(z)
    assert tuple(out.shape) == shape


def test_decode_zero_latent_in_range(codec):
    with torch.no_grad():
        out = codec.decode(torch.zeros(2, 4, 6, 16))
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("shape,axis", [((7, 8, 8, 3), "T"), ((4, 12, 8, 3), "H"), ((4, 8, 9, 3), "W")])
def test_bad_shapes_name_axis(shape, axis):
    with pytest.raises(ShapeError, match=f"axis {axis}"):
        check_video_shape(shape)


def test_codec_factors_fixed():
    with pytest.raises(ValidationError):
        CodecConfig(spatial_factor=4)


def test_cannot_decode_condition_latent(codec):
    with pytest.raises(ValidationError):
        codec.decode(LatentBlock(torch.zeros(1, 1, 1, 16), "trajectory"))


def test_pad_image_latent():
    zi = LatentBlock(torch.randn(1, 4, 6, 16), "image")
    out = pad_image_latent(zi, 13)
    assert out.shape == (13, 4, 6, 16)
    assert torch.equal(out.data[0], zi.data[0])
    assert out.data[1:].abs().sum() == 0
    assert torch.equal(pad_image_latent(zi, 1).data, zi.data)
    with pytest.raises(ShapeError):
        pad_image_latent(LatentBlock(torch.randn(2, 4, 6, 16)), 4)


def test_concat_channels():
    a, b = torch.randn(2, 4, 6, 16), torch.randn(2, 4, 6, 16)
    out = concat_channels(LatentBlock(a), LatentBlock(b))
    assert out.shape == (2, 4, 6, 32)
    assert torch.equal(out.data[..., :16], a)
    with pytest.raises(ShapeError):
        concat_channels(LatentBlock(a), LatentBlock(torch.randn(3, 4, 6, 16)))


def test_image_encoding_repeats_frame(codec):
    img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    with torch.no_grad():
        zi = codec.encode_image(img)
        zv = codec.encode(np.repeat(img[None], 4, axis=0))
    assert zi.shape == (1, 2, 2, 16) and torch.equal(zi.data, zv.data)


def test_overfit_one_clip():
    clip = random_clip(np.random.default_rng(3), 2).video
    codec = VideoCodec(CodecConfig(hidden_widths=[64, 64]))
    torch.manual_seed(0)
    fit_codec(codec, [clip], steps=600, lr=3e-3)
    with torch.no_grad():
        rec = codec.decode(codec.encode(clip)).numpy()
    assert np.abs(rec - clip).mean() < 0.05


def test_reconstruction_gradient_matches_finite_differences():
    torch.manual_seed(1)
    codec = VideoCodec(CodecConfig(hidden_widths=[8, 8])).double()
    video = torch.rand(4, 8, 8, 3, dtype=torch.float64)
    w = codec.encoder[0].weight
    loss = codec.reconstruction_loss(video)
    (grad,) = torch.autograd.grad(loss, w)
    h = 1e-6
    # sample among entries with non-negligible gradient so the relative error is meaningful
    flat = grad.abs().flatten()
    candidates = torch.nonzero(flat >= flat.median()).flatten().numpy()
    rng = np.random.default_rng(0)
    for pick in rng.choice(candidates, size=5, replace=False):
        idx = np.unravel_index(int(pick), tuple(w.shape))
        with torch.no_grad():
            orig = w[idx].item()
            w[idx] = orig + h
            up = codec.reconstruction_loss(video).item()
            w[idx] = orig - h
            down = codec.reconstruction_loss(video).item()
            w[idx] = orig
        fd = (up - down) / (2 * h)
        an = grad[idx].item()
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)
