import numpy as np
import pytest

from trajvid.clients import ExternalClients, FailingClient, PhraseTableExtractor, cached
from trajvid.datapipe import (BUCKET_KEYS, Diagnostics, FilterThresholds, TripletRecord, area_ratio,
                              build_benchmark, bucket_key, curate, extract_objects, filter_record, flow_score,
                              read_benchmark, read_manifest, write_benchmark, write_manifest)
from trajvid.errors import InputError, UndefinedScore
from trajvid.synthetic import SquareSpec, render_squares, stub_clients
from trajvid.trajgeo import FrameAnnotation, ObjectTrack, TrajectorySet, extract_bbox

from conftest import square_mask


def test_extract_objects():
    ext = PhraseTableExtractor(["ball", "dog", "cat"])
    assert extract_objects("a dog chasing a ball in the park", ext) == ["dog", "ball"]
    assert extract_objects("a static landscape", ext) == []
    with pytest.raises(InputError):
        extract_objects("", ext)


def test_flow_score_examples():
    H, W = 4, 6
    assert flow_score([np.ones((H, W, 2))]) == 1.0
    f = np.full((H, W, 2), 3.0)
    f[..., 1] = -1.0
    assert flow_score([f]) == 2.0
    g = np.zeros((H, W, 2))
    g[:, :3] = 4.0
    fg = np.zeros((H, W), bool)
    fg[:, :3] = True
    assert flow_score([g], fg) == 4.0
    assert flow_score([g]) == 2.0
    with pytest.raises(UndefinedScore):
        flow_score([g], np.zeros((H, W), bool))


def _ts(stacks):
    tracks = []
    for oid, st in enumerate(stacks):
        tracks.append(ObjectTrack(oid, (255, oid, 0), [FrameAnnotation(t, mask=m) for t, m in enumerate(st)]))
    return TrajectorySet(tracks, (len(stacks[0]),) + stacks[0][0].shape)


def test_area_ratio_examples():
    H = W = 8
    full = [np.ones((H, W), bool)] * 3
    assert area_ratio(_ts([full])) == 1.0
    quarter = [square_mask(H, W, 0, 0, 3, 3)] * 3
    assert area_ratio(_ts([quarter])) == 0.25
    a = [square_mask(H, W, 0, 0, 3, 3)] * 2
    b = [square_mask(H, W, 2, 0, 5, 3)] * 2
    assert area_ratio(_ts([a, b])) == 0.375


def _rec(flow=3.0, fg=(2.5,), count=2, area=0.5):
    return TripletRecord("r", "c", None, Diagnostics(flow, list(fg), count, area))


def test_filter_examples():
    assert filter_record(_rec(flow=1.9)).status_label == "rejected(low_motion)"
    assert filter_record(_rec(count=4)).status_label == "rejected(object_count)"
    assert filter_record(_rec()).status == "kept"
    assert filter_record(_rec(fg=(2.5, 1.0))).status_label == "rejected(fg_motion)"
    assert filter_record(_rec(area=0.9)).status_label == "rejected(area_ratio)"
    # first failing predicate wins
    assert filter_record(_rec(flow=0.1, count=9, area=0.99)).reason == "low_motion"


def test_filter_idempotent_and_order_free():
    recs = [_rec(flow=f, count=c) for f in (1.0, 2.0, 3.0) for c in (0, 1, 4)]
    once = [filter_record(r).status_label for r in recs]
    twice = [filter_record(filter_record(r)).status_label for r in recs]
    rev = [filter_record(r).status_label for r in reversed(recs)][::-1]
    assert once == twice == rev


def test_thresholds_validate():
    from trajvid.errors import ValidationError
    with pytest.raises(ValidationError):
        FilterThresholds(object_count_range=(3, 1))


def test_curate_one_square():
    clip = render_squares([SquareSpec("red square", 6, (2, 3), (3, 2))], 8, 32, 48, pan=(3, 2))
    rec = curate(clip.video, clip.caption, stub_clients([clip]), video_ref="x")
    assert rec.trajectory.object_count == 1
    boxes = rec.trajectory.box_tracks()[0]
    for t in range(8):
        assert boxes[t] == extract_bbox(clip.masks[0][t])
    assert filter_record(rec).status == "kept"


def test_curate_static_clip():
    clip = render_squares([], 8, 32, 48, caption="a static landscape")
    rec = curate(clip.video, clip.caption, stub_clients([clip]))
    assert rec.status_label == "rejected(no_foreground)"
    assert filter_record(rec).status_label == "rejected(no_foreground)"


def test_curate_colors_distinct(synthetic_clips):
    clients = stub_clients(synthetic_clips)
    for c in synthetic_clips:
        rec = curate(c.video, c.caption, clients)
        cols = [tr.color for tr in rec.trajectory.tracks]
        assert len(set(cols)) == len(cols)


def test_curate_client_error(synthetic_clips):
    c = synthetic_clips[0]
    dead = FailingClient()
    rec = curate(c.video, c.caption, ExternalClients(dead, dead, dead))
    assert rec.status_label == "rejected(client_error)"


def test_cached_curation_is_byte_identical(tmp_path, synthetic_clips):
    outputs = []
    for run in range(2):
        clients = cached(stub_clients(synthetic_clips), tmp_path / "cache")
        recs = [filter_record(curate(c.video, c.caption, clients, c.video_ref)) for c in synthetic_clips]
        path = write_manifest(recs, tmp_path / f"run{run}" / "m.jsonl")
        outputs.append(path.read_bytes())
    assert outputs[0] == outputs[1]


def test_manifest_roundtrip(tmp_path, kept_records):
    path = write_manifest(kept_records, tmp_path / "m.jsonl")
    back = read_manifest(path)
    assert [r.video_ref for r in back] == [r.video_ref for r in kept_records]
    assert all(r.status == "kept" for r in back)
    assert back[0].diagnostics == kept_records[0].diagnostics
    assert np.array_equal(back[0].trajectory.mask_tracks()[0], kept_records[0].trajectory.mask_tracks()[0])


def _kept(n, ref):
    H = W = 16
    stacks = [[square_mask(H, W, i, i, i + 1, i + 1)] for i in range(n)]
    return TripletRecord(ref, "c", _ts(stacks), Diagnostics(3, [3] * n, n, 0.1), "kept")


def test_bucketing():
    bench = build_benchmark([_kept(n, f"r{i}") for i, n in enumerate([1, 2, 2, 7])])
    assert bench.counts() == {"1": 1, "2": 2, "3": 0, "4": 0, "5": 0, "gt5": 1}
    assert bucket_key(5) == "5" and bucket_key(6) == "gt5"
    capped = build_benchmark([_kept(1, f"r{i}") for i in range(5)], capacity=3)
    assert capped.counts()["1"] == 3 and len(capped.overflow) == 2
    with pytest.raises(InputError):
        build_benchmark([TripletRecord("x", "c", None, None, "rejected", "low_motion")])


def test_benchmark_io(tmp_path):
    bench = build_benchmark([_kept(n, f"r{n}") for n in range(1, 9)])
    write_benchmark(bench, tmp_path / "b")
    back = read_benchmark(tmp_path / "b")
    assert set(back) == set(BUCKET_KEYS)
    assert {k: len(v) for k, v in back.items()} == bench.counts()
