"""Three chained training stages on a tiny corpus, then generation and scoring.

Stage 1 learns from dense masks, stage 2 from boxes and stage 3 from a handful
of box keyframes.  Each stage starts from the previous checkpoint; the segment
head joins at stage 2.  Expect a few minutes on one CPU core.
"""
import tempfile
from pathlib import Path

import torch

from trajvid.datapipe import curate, filter_record
from trajvid.evalkit import ColorMatchTracker, OracleTracker, evaluate
from trajvid.stages import StageConfig, probe_loss, run_pipeline
from trajvid.synthetic import corpus, stub_clients
from trajvid.workflow import generate_for_records

torch.set_num_threads(1)
clips = corpus(n=4, object_counts=(1, 2, 1, 3), include_static=False)
clients = stub_clients(clips)
data = [filter_record(curate(c.video, c.caption, clients, c.video_ref)) for c in clips]
data = [r for r in data if r.status == "kept"]
print(f"{len(data)} training clips")

workdir = Path(tempfile.mkdtemp(prefix="trajvid-train-"))
cfgs = [
    StageConfig(stage_id=1, max_steps=150, codec_steps=300, base_steps=150),
    StageConfig(stage_id=2, init_from="previous", max_steps=100),
    StageConfig(stage_id=3, init_from="previous", max_steps=100),
]
reports = run_pipeline(cfgs, data, workdir)
for prev, r in zip([None] + reports, reports):
    first, last = r.steps[0], r.steps[-1]
    chained = prev is None or r.init_digest == prev.final_digest
    print(f"stage {r.stage_id}: l_diff {first.l_diff:.3f} -> {last.l_diff:.3f}, "
          f"seg term {last.seg_contribution:.3f}, starts from previous weights: {chained}")

model = reports[-1].model
print("probe loss with sparse boxes:", round(probe_loss(model, data, kind="sparse_box", sparsity_k=4), 4))

videos = generate_for_records(model, data, kind="sparse_box", sparsity_k=4, n_steps=25)
report = evaluate(videos, data, ColorMatchTracker())
print("color-tracker IoU on generated clips:", report.overall.mask_iou, report.overall.box_iou)
sanity = evaluate(videos, data, OracleTracker(data))
print("oracle tracker (harness self-check):", sanity.overall.mask_iou)
