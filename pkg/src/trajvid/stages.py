"""Dense-to-sparse staged training: mask -> box -> sparse box.

Each stage starts from the previous stage's checkpoint.  The codec and the
base denoiser stay frozen (unless ``freeze_base`` is off); the control branch
trains in every stage and the segment head joins from stage 2 on.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .datapipe import TripletRecord
from .ditcore import diffusion_loss, add_noise
from .errors import InputError, NumericsError, ValidationError, WeightsError
from .latent3d import fit_codec, pad_image_latent
from .model import ModelConfig, TrajVideoModel
from .seghead import LossWeights, seg_loss, total_loss
from .trajgeo import MAX_SPARSE_FRAMES, render_box_map, render_mask_map, sparsify
from .videoio import load_video

STAGE_KINDS = {1: "mask", 2: "box", 3: "sparse_box"}
STAGE_META = "stage.json"
REFERENCE_SETTINGS = {"optimizer": "AdamW", "lr": 1e-5, "batch": 1, "epochs": 1}


def make_condition(ts, kind: str, sparsity_k: int = 6) -> np.ndarray:
    if kind == "mask":
        return render_mask_map(ts)
    if kind == "box":
        return render_box_map(ts)
    if kind in ("sparse_box", "sparse"):
        return render_box_map(sparsify(ts, sparsity_k))
    raise ValidationError(f"unknown condition kind {kind!r}")


@dataclass
class OptimizerConfig:
    algorithm: str = "AdamW"
    lr: float = 1e-3
    batch: int = 1
    epochs: int = 1
    weight_decay: float = 0.01
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.algorithm != "AdamW":
            raise ValidationError("only AdamW is supported")
        if self.batch != 1:
            raise ValidationError("batch size is fixed at 1")
        if self.lr <= 0 or self.epochs < 1:
            raise ValidationError("lr must be positive and epochs >= 1")


@dataclass
class StageConfig:
    stage_id: int
    condition_kind: Optional[str] = None
    lambda_seg: Optional[float] = None
    init_from: str = "scratch"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sparsity_k: int = 6
    seed: int = 0
    max_steps: Optional[int] = None
    output: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    codec_steps: int = 0
    base_steps: int = 0
    freeze_base: bool = True
    override_lambda: bool = False
    ablation: bool = False
    log_every: int = 1

    def __post_init__(self):
        if self.stage_id not in STAGE_KINDS:
            raise ValidationError(f"stage_id must be 1, 2 or 3, got {self.stage_id}")
        expected_kind = STAGE_KINDS[self.stage_id]
        if self.condition_kind is None:
            self.condition_kind = expected_kind
        expected_lambda = LossWeights.for_stage(self.stage_id).lambda_seg
        if self.lambda_seg is None:
            self.lambda_seg = expected_lambda
        if self.condition_kind != expected_kind and not self.ablation:
            raise ValidationError(f"stage {self.stage_id} uses {expected_kind!r} conditions")
        if self.lambda_seg != expected_lambda and not self.override_lambda:
            raise ValidationError(f"stage {self.stage_id} requires lambda_seg={expected_lambda} "
                                  "(set override_lambda to change it)")
        if not 1 <= self.sparsity_k <= MAX_SPARSE_FRAMES:
            raise ValidationError(f"sparsity_k must be in [1, {MAX_SPARSE_FRAMES}]")
        if self.stage_id > 1 and self.init_from == "scratch" and not self.ablation:
            raise ValidationError(f"stage {self.stage_id} must start from stage {self.stage_id - 1} "
                                  "(set ablation to train from scratch)")
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_json(self.model)

    @property
    def label(self) -> str:
        if self.stage_id > 1 and self.init_from == "scratch":
            return "w/o PT"
        if self.stage_id > 1 and self.lambda_seg == 0:
            return "w/o LSL"
        return f"stage{self.stage_id}"

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["model"] = self.model.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "StageConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "StageConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class StepLog:
    step: int
    l_diff: float
    l_seg: float
    total: float
    seg_contribution: float
    t: int


@dataclass
class TrainReport:
    stage_id: int
    label: str
    steps: list[StepLog]
    wall_clock: float
    checkpoint: Optional[str]
    init_from: str
    init_digest: str
    final_digest: str
    data_seed: int
    config: dict
    reference_settings: dict = field(default_factory=lambda: dict(REFERENCE_SETTINGS))
    model: Optional[TrajVideoModel] = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        doc["steps"] = [asdict(s) for s in self.steps]
        return doc

    def write_jsonl(self, path) -> Path:
        """One record per logged step, then a summary record."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"stage_id": self.stage_id, **asdict(s)}) for s in self.steps]
        summary = self.to_json()
        summary.pop("steps")
        lines.append(json.dumps({"summary": summary}, sort_keys=True))
        path.write_text("\n".join(lines) + "\n")
        return path


# -- data ------------------------------------------------------------------------


def record_clip(rec: TripletRecord) -> np.ndarray:
    if rec.video is not None:
        return np.asarray(rec.video, dtype=np.float32)
    return load_video(rec.video_ref)


@dataclass
class Example:
    z0: torch.Tensor
    z_img: torch.Tensor
    z_traj: torch.Tensor
    z_mask: torch.Tensor


def encode_example(model: TrajVideoModel, rec: TripletRecord, kind: str, sparsity_k: int) -> Example:
    if rec.trajectory is None:
        raise InputError(f"{rec.video_ref}: record has no trajectory")
    clip = record_clip(rec)
    ts = rec.trajectory
    if tuple(clip.shape[:3]) != ts.canvas:
        raise InputError(f"{rec.video_ref}: clip {clip.shape[:3]} does not match trajectory canvas {ts.canvas}")
    codec = model.codec
    with torch.no_grad():
        z0 = codec.encode(clip).data
        zi = codec.encode_image(clip[0])
        z_img = pad_image_latent(zi, z0.shape[0]).data
        z_traj = codec.encode(make_condition(ts, kind, sparsity_k), kind="trajectory").data
        z_mask = codec.encode(render_mask_map(ts), kind="mask").data
    return Example(z0, z_img, z_traj, z_mask)


def _max_k(rec: TripletRecord) -> int:
    return min([len(tr.frames) for tr in rec.trajectory.tracks] + [MAX_SPARSE_FRAMES])


# -- model setup -----------------------------------------------------------------


def pretrain_base(model: TrajVideoModel, dataset: Sequence[TripletRecord], steps: int, lr: float = 1e-3,
                  seed: int = 0, cond_dropout: float | None = None) -> list[float]:
    """Train the base image-to-video denoiser without trajectory input."""
    gen = torch.Generator().manual_seed(seed)
    drop = model.cfg.dit.cond_dropout if cond_dropout is None else cond_dropout
    examples = [encode_example(model, r, "mask", 1) for r in dataset]
    opt = torch.optim.AdamW(model.base.parameters(), lr=lr)
    n_train = model.schedule.n_steps
    losses = []
    for step in range(steps):
        ex = examples[step % len(examples)]
        t = int(torch.randint(1, n_train + 1, (1,), generator=gen))
        eps = torch.randn(ex.z0.shape, generator=gen, dtype=ex.z0.dtype)
        uncond = bool(torch.rand(1, generator=gen) < drop)
        ab = model.schedule.alpha_bar(t)
        x_t = add_noise(ex.z0, eps, ab)
        out = model.base(torch.cat([ex.z_img, x_t], -1), t, unconditional=uncond)
        loss = diffusion_loss(ex.z0, x_t, out.v, ab)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.base.parameters(), 1.0)
        opt.step()
        losses.append(loss.item())
    return losses


def build_scratch_model(cfg: StageConfig, dataset: Sequence[TripletRecord]) -> TrajVideoModel:
    """Fresh model; optionally fits the codec and pretrains the base on ``dataset`` first."""
    model = TrajVideoModel(cfg.model, seed=cfg.seed)
    if cfg.codec_steps:
        clips = []
        for r in dataset:
            clips.append(record_clip(r))
            clips.append(render_mask_map(r.trajectory))
        fit_codec(model.codec, clips, cfg.codec_steps, seed=cfg.seed)
    if cfg.base_steps:
        pretrain_base(model, dataset, cfg.base_steps, seed=cfg.seed)
    model.attach_control()
    return model


def read_stage_meta(directory) -> dict:
    path = Path(directory) / STAGE_META
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def load_stage_model(cfg: StageConfig, dataset) -> TrajVideoModel:
    if cfg.init_from == "scratch":
        return build_scratch_model(cfg, dataset)
    src = Path(cfg.init_from)
    if not (src / "index.json").exists():
        raise WeightsError(f"init checkpoint {src} does not exist")
    meta = read_stage_meta(src)
    prev = meta.get("stage_id")
    if not cfg.ablation and prev is not None and prev != cfg.stage_id - 1:
        raise ValidationError(f"stage {cfg.stage_id} must start from stage {cfg.stage_id - 1}, "
                              f"{src} holds stage {prev}")
    model = TrajVideoModel.load(src)
    if model.control is None:
        model.attach_control()
    return model


# -- training --------------------------------------------------------------------


def _trainable(model: TrajVideoModel, cfg: StageConfig) -> list[torch.nn.Parameter]:
    for p in model.parameters():
        p.requires_grad_(False)
    groups = [model.control]
    if model.seghead is not None:
        groups.append(model.seghead)
    if not cfg.freeze_base:
        groups.append(model.base)
    params = []
    for g in groups:
        for p in g.parameters():
            p.requires_grad_(True)
            params.append(p)
    return params


def train_stage(cfg: StageConfig, dataset: Sequence[TripletRecord],
                model: TrajVideoModel | None = None) -> TrainReport:
    """Run ``epochs * len(dataset)`` AdamW steps (capped by ``max_steps``) on the stage objective."""
    if not dataset:
        raise InputError("dataset is empty")
    start = time.time()
    if model is None:
        model = load_stage_model(cfg, dataset)
    fresh_head = cfg.stage_id >= 2 and model.seghead is None
    if fresh_head:
        model.attach_seghead(seed=cfg.seed)
    # a head created here has no predecessor to match
    init_digest = model.digest(exclude_prefixes=("seghead.",) if fresh_head else ())
    weights = LossWeights(cfg.lambda_seg)
    params = _trainable(model, cfg)
    oc = cfg.optimizer
    opt = torch.optim.AdamW(params, lr=oc.lr, weight_decay=oc.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n_train = model.schedule.n_steps
    drop = model.cfg.dit.cond_dropout
    total_steps = oc.epochs * len(dataset) if cfg.max_steps is None else cfg.max_steps
    cache: dict[tuple[int, int], Example] = {}
    logs: list[StepLog] = []
    model.train()
    step = 0
    while step < total_steps:
        order = torch.randperm(len(dataset), generator=gen).tolist()
        for idx in order:
            if step >= total_steps:
                break
            rec = dataset[idx]
            k = cfg.sparsity_k
            if cfg.condition_kind == "sparse_box":
                # per-example sparsity in [2, 9], bounded by the shortest track
                hi = _max_k(rec)
                k = int(rng.integers(min(2, hi), hi + 1))
            key = (idx, k)
            if key not in cache:
                cache[key] = encode_example(model, rec, cfg.condition_kind, k)
            ex = cache[key]
            t = int(torch.randint(1, n_train + 1, (1,), generator=gen))
            eps = torch.randn(ex.z0.shape, generator=gen, dtype=torch.float64).to(ex.z0.dtype)
            uncond = bool(torch.rand(1, generator=gen) < drop)
            ab = model.schedule.alpha_bar(t)
            x_t = add_noise(ex.z0, eps, ab)
            out = model.predict(ex.z_img, x_t, ex.z_traj, t, unconditional=uncond)
            l_diff = diffusion_loss(ex.z0, x_t, out.v, ab)
            if model.seghead is not None:
                l_seg = seg_loss(model.seghead(out.features), ex.z_mask)
            else:
                l_seg = l_diff.new_zeros(())
            try:
                loss = total_loss(l_diff, l_seg, weights)
                if not torch.isfinite(loss):
                    raise NumericsError("loss is not finite")
            except NumericsError as exc:
                dump = _abort_dump(model, cfg)
                raise NumericsError(f"{exc} at step {step}; weights dumped to {dump}") from exc
            opt.zero_grad()
            loss.backward()
            if oc.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, oc.grad_clip)
            opt.step()
            if step % cfg.log_every == 0 or step == total_steps - 1:
                ld, ls = l_diff.item(), l_seg.item()
                logs.append(StepLog(step, ld, ls, loss.item(), weights.lambda_seg * ls, t))
            step += 1
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.trained = True
    final_digest = model.digest()
    ckpt = None
    if cfg.output:
        ckpt = str(save_stage(model, cfg, final_digest))
    return TrainReport(cfg.stage_id, cfg.label, logs, time.time() - start, ckpt, cfg.init_from,
                       init_digest, final_digest, cfg.seed, cfg.to_json(), model=model)


def save_stage(model: TrajVideoModel, cfg: StageConfig, digest: str | None = None) -> Path:
    out = model.save(cfg.output)
    meta = {"stage_id": cfg.stage_id, "condition_kind": cfg.condition_kind, "label": cfg.label,
            "digest": digest or model.digest(), "init_from": cfg.init_from}
    (out / STAGE_META).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return out


def _abort_dump(model: TrajVideoModel, cfg: StageConfig) -> Optional[str]:
    if not cfg.output:
        return None
    target = Path(str(cfg.output) + ".aborted")
    model.save(target)
    return str(target)


@torch.no_grad()
def probe_loss(model: TrajVideoModel, dataset: Sequence[TripletRecord], kind: str = "mask",
               n_probes: int = 16, seed: int = 1234, sparsity_k: int = 6) -> float:
    """Mean conditional diffusion loss over a fixed set of (record, t, noise) probes."""
    gen = torch.Generator().manual_seed(seed)
    examples = [encode_example(model, r, kind, min(sparsity_k, _max_k(r))) for r in dataset]
    n_train = model.schedule.n_steps
    total = 0.0
    for i in range(n_probes):
        ex = examples[i % len(examples)]
        t = int(torch.randint(1, n_train + 1, (1,), generator=gen))
        eps = torch.randn(ex.z0.shape, generator=gen, dtype=torch.float64).to(ex.z0.dtype)
        ab = model.schedule.alpha_bar(t)
        x_t = add_noise(ex.z0, eps, ab)
        out = model.predict(ex.z_img, x_t, ex.z_traj, t)
        total += float(diffusion_loss(ex.z0, x_t, out.v, ab))
    return total / n_probes


# -- pipeline --------------------------------------------------------------------


FAILURE_MARKER = "FAILED_STAGE.json"


def run_pipeline(cfgs: Sequence[StageConfig], dataset: Sequence[TripletRecord], workdir) -> list[TrainReport]:
    """Run stages in order, threading each stage's checkpoint into the next.

    A stage whose ``init_from`` is ``"previous"`` is pointed at the prior
    stage's output.  On failure a marker naming the resumable checkpoint is
    written to ``workdir`` and the error is re-raised.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    ids = [c.stage_id for c in cfgs]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        raise ValidationError(f"stages must be strictly ordered, got {ids}")
    reports: list[TrainReport] = []
    prev_out: Optional[str] = None
    for cfg in cfgs:
        if cfg.output is None:
            cfg.output = str(workdir / f"stage{cfg.stage_id}")
        if cfg.init_from == "previous":
            if prev_out is None:
                raise ValidationError(f"stage {cfg.stage_id} has no previous stage to start from")
            cfg.init_from = prev_out
        elif prev_out is not None and cfg.init_from != "scratch" and \
                os.path.abspath(cfg.init_from) != os.path.abspath(prev_out) and not cfg.ablation:
            raise ValidationError(f"stage {cfg.stage_id} init_from {cfg.init_from} is not the previous output")
        try:
            report = train_stage(cfg, dataset)
        except Exception as exc:
            marker = {"failed_stage": cfg.stage_id, "error": repr(exc), "resume_from": prev_out}
            (workdir / FAILURE_MARKER).write_text(json.dumps(marker, indent=1))
            raise
        report.write_jsonl(workdir / f"stage{cfg.stage_id}_report.jsonl")
        reports.append(report)
        prev_out = report.checkpoint
    marker = workdir / FAILURE_MARKER
    if marker.exists():
        marker.unlink()
    return reports
