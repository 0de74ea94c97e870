"""Curate a synthetic corpus with stub clients, filter it and bucket the survivors.

The stubs stand in for the external object extractor, grounded segmenter and
optical-flow model.  Every answer is cached by input digest, so a second pass
over the same cache directory needs no clients at all.
"""
import tempfile
from pathlib import Path

from trajvid.clients import cached
from trajvid.datapipe import build_benchmark, curate, filter_record, write_manifest
from trajvid.synthetic import corpus, replay_clients, stub_clients

clips = corpus(n=8, object_counts=(1, 2, 3, 4, 1, 2, 3, 1))
workdir = Path(tempfile.mkdtemp(prefix="trajvid-demo-"))

clients = cached(stub_clients(clips), workdir / "cache")
records = []
for c in clips:
    rec = filter_record(curate(c.video, c.caption, clients, video_ref=c.video_ref))
    d = rec.diagnostics
    print(f"{c.video_ref}: {rec.status_label:<24} objects={d.object_count} "
          f"flow={d.flow_score:.2f} area={d.area_ratio:.3f}  <- {c.caption!r}")
    records.append(rec)

# replay from the cache only
replayed = replay_clients(workdir / "cache")
again = [filter_record(curate(c.video, c.caption, replayed, video_ref=c.video_ref)) for c in clips]
print("replay matches:", [r.status_label for r in again] == [r.status_label for r in records])

kept = [r for r in records if r.status == "kept"]
bench = build_benchmark(kept)
print("bucket sizes:", bench.counts())
print("manifest written to", write_manifest(records, workdir / "triplets.jsonl"))
