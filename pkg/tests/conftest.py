import numpy as np
import pytest
import torch

from trajvid.datapipe import curate, filter_record
from trajvid.ditcore import DitConfig
from trajvid.latent3d import CodecConfig
from trajvid.model import ModelConfig, TrajVideoModel
from trajvid.synthetic import corpus, stub_clients


def small_config(hidden=32, blocks=2, heads=2, codec_width=16, seg_width=16) -> ModelConfig:
    return ModelConfig(dit=DitConfig(hidden_dim=hidden, n_blocks=blocks, n_heads=heads, freq_dim=32),
                       codec=CodecConfig(hidden_widths=[codec_width, codec_width]), seg_width=seg_width)


@pytest.fixture
def small_model():
    model = TrajVideoModel(small_config(), seed=0)
    model.attach_control()
    return model


@pytest.fixture(scope="session")
def synthetic_clips():
    return corpus()


@pytest.fixture(scope="session")
def kept_records(synthetic_clips):
    clients = stub_clients(synthetic_clips)
    recs = [filter_record(curate(c.video, c.caption, clients, video_ref=c.video_ref)) for c in synthetic_clips]
    return [r for r in recs if r.status == "kept"]


def square_mask(H, W, x0, y0, x1, y1):
    m = np.zeros((H, W), dtype=bool)
    m[y0:y1 + 1, x0:x1 + 1] = True
    return m


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
