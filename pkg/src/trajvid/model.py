"""Bundle of codec, base denoiser, control branch and segment head with a shared checkpoint.

Parameters are namespaced ``codec.*``, ``base.*``, ``control.*`` and
``seghead.*``.  The model configuration is stored next to the tensor index
as ``config.json``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import tensorio
from .ditcore import DenoiserOutput, DitConfig, NoiseSchedule, TrajDiT
from .errors import WeightsError
from .latent3d import CodecConfig, VideoCodec
from .seghead import SegHead
from .trajcontrol import ControlBranch, full_forward, init_from_base

CONFIG_NAME = "config.json"


@dataclass
class ModelConfig:
    dit: DitConfig = field(default_factory=DitConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    seg_width: int = 64
    train_steps: int = 1000

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(dit=DitConfig(**doc.get("dit", {})), codec=CodecConfig(**doc.get("codec", {})),
                   seg_width=doc.get("seg_width", 64), train_steps=doc.get("train_steps", 1000))


class TrajVideoModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        torch.manual_seed(seed)
        self.codec = VideoCodec(cfg.codec)
        self.base = TrajDiT(cfg.dit)
        self.control: ControlBranch | None = None
        self.seghead: SegHead | None = None
        self.schedule = NoiseSchedule(cfg.train_steps)
        self.trained = False

    def attach_control(self) -> ControlBranch:
        self.control = init_from_base(self.base)
        return self.control

    def attach_seghead(self, seed: int = 0) -> SegHead:
        torch.manual_seed(seed)
        self.seghead = SegHead(self.cfg.dit.hidden_dim, self.cfg.dit.n_blocks, self.cfg.seg_width).to(
            self.base.dtype)
        return self.seghead

    def predict(self, z_image_padded, x_t, z_traj, t, control_scale: float = 1.0,
                unconditional: bool = False) -> DenoiserOutput:
        return full_forward(self.base, self.control, z_image_padded, x_t, z_traj, t,
                            control_scale=control_scale, unconditional=unconditional)

    # -- persistence -------------------------------------------------------

    def tensors(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def digest(self, exclude_prefixes=()) -> str:
        return tensorio.digest_tensors(self.tensors(), exclude_prefixes)

    def save(self, directory) -> Path:
        directory = Path(directory)
        tensorio.save_checkpoint(directory, self.tensors())
        (directory / CONFIG_NAME).write_text(json.dumps(self.cfg.to_json(), indent=1, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "TrajVideoModel":
        directory = Path(directory)
        try:
            cfg = ModelConfig.from_json(json.loads((directory / CONFIG_NAME).read_text()))
            tensors = tensorio.load_checkpoint(directory)
        except (FileNotFoundError, ValueError) as exc:
            raise WeightsError(f"cannot load checkpoint {directory}: {exc}") from exc
        model = cls(cfg)
        if any(k.startswith("control.") for k in tensors):
            model.attach_control()
        if any(k.startswith("seghead.") for k in tensors):
            model.attach_seghead()
        state = model.state_dict()
        missing = sorted(set(state) - set(tensors))
        if missing:
            raise WeightsError(f"checkpoint {directory} lacks {missing[:3]}...")
        model.load_state_dict({k: torch.from_numpy(tensors[k]) for k in state})
        model.trained = True
        model.eval()
        return model
