import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajvid.errors import EmptyMask, InputError, InvalidSparsity, OutOfBounds, PaletteExhausted, ValidationError
from trajvid.trajgeo import (FrameAnnotation, ObjectTrack, TrajectorySet, assign_palette, box_to_mask,
                             extract_bbox, load_trajectory, mask_to_rle, render_box_map, render_mask_map,
                             rle_to_mask, save_trajectory, sparse_positions, sparsify, tracks_from_masks)

from conftest import square_mask


def test_extract_bbox_examples():
    assert extract_bbox(np.ones((8, 8), bool)) == (0, 0, 7, 7)
    m = np.zeros((8, 8), bool)
    m[3, 5] = True
    assert extract_bbox(m) == (5, 3, 5, 3)
    m = np.zeros((8, 8), bool)
    for r, c in [(1, 1), (1, 2), (4, 2)]:
        m[r, c] = True
    assert extract_bbox(m) == (1, 1, 2, 4)


def test_extract_bbox_empty():
    with pytest.raises(EmptyMask):
        extract_bbox(np.zeros((4, 4), bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bbox_covers_mask(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((12, 9)) < 0.2
    m[rng.integers(12), rng.integers(9)] = True
    box = box_to_mask(extract_bbox(m), 12, 9)
    assert not (m & ~box).any()
    ys, xs = np.nonzero(m)
    assert extract_bbox(m) == (xs.min(), ys.min(), xs.max(), ys.max())


def test_palette():
    assert assign_palette(0) == []
    assert assign_palette(1) == assign_palette(1)
    cols = assign_palette(3)
    assert len(set(cols)) == 3 and (0, 0, 0) not in cols
    full = assign_palette(255)
    assert len(set(full)) == 255 and (0, 0, 0) not in full
    with pytest.raises(PaletteExhausted):
        assign_palette(256)


def _track(oid, frames, color=None):
    return ObjectTrack(oid, color or assign_palette(oid + 1)[oid], frames)


def test_render_mask_map_examples():
    empty = TrajectorySet([], (3, 4, 5))
    assert render_mask_map(empty).shape == (3, 4, 5, 3) and not render_mask_map(empty).any()

    full = np.ones((4, 5), bool)
    ts = TrajectorySet([_track(0, [FrameAnnotation(0, mask=full)])], (3, 4, 5))
    out = render_mask_map(ts)
    color = np.asarray(ts.tracks[0].color) / 255.0
    assert np.allclose(out[0], color) and not out[1:].any()


def test_render_mask_overlap_uses_larger_id():
    H, W = 8, 8
    a = square_mask(H, W, 0, 0, 4, 4)
    b = square_mask(H, W, 3, 3, 7, 7)
    f0 = square_mask(H, W, 0, 0, 0, 0)
    cols = assign_palette(2)
    ts = TrajectorySet([ObjectTrack(1, cols[1], [FrameAnnotation(0, mask=f0), FrameAnnotation(2, mask=b)]),
                        ObjectTrack(0, cols[0], [FrameAnnotation(0, mask=f0), FrameAnnotation(2, mask=a)])],
                       (3, H, W))
    out = render_mask_map(ts)
    # oracle: paint in ascending id order
    want = np.zeros((H, W, 3))
    want[a] = np.asarray(cols[0]) / 255.0
    want[b] = np.asarray(cols[1]) / 255.0
    assert np.array_equal(out[2], want.astype(out.dtype))


def test_render_box_map_examples():
    H, W = 6, 7
    f0 = square_mask(H, W, 1, 1, 2, 2)
    ts = TrajectorySet([_track(0, [FrameAnnotation(0, mask=f0), FrameAnnotation(1, bbox=(0, 0, W - 1, H - 1))])],
                       (4, H, W))
    out = render_box_map(ts)
    color = np.asarray(ts.tracks[0].color) / 255.0
    assert np.allclose(out[1], color)

    m3 = np.zeros((H, W), bool)
    m3[[1, 4], [2, 5]] = True
    ts = TrajectorySet([_track(0, [FrameAnnotation(0, mask=f0), FrameAnnotation(3, mask=m3)])], (4, H, W))
    rect = render_box_map(ts)[3].any(-1)
    assert np.array_equal(rect, box_to_mask(extract_bbox(m3), H, W))


def test_box_map_frame0_uses_mask():
    H, W = 8, 8
    m = np.zeros((H, W), bool)
    m[[1, 5], [1, 6]] = True
    ts = TrajectorySet([_track(0, [FrameAnnotation(0, bbox=extract_bbox(m), mask=m)])], (2, H, W))
    assert np.array_equal(render_box_map(ts)[0], render_mask_map(ts)[0])
    assert render_box_map(ts)[0].any(-1).sum() == 2


def test_render_mask_map_rejects_box_only():
    H, W = 5, 5
    ts = TrajectorySet([_track(0, [FrameAnnotation(0, mask=square_mask(H, W, 0, 0, 1, 1)),
                                   FrameAnnotation(1, bbox=(0, 0, 2, 2))])], (2, H, W))
    with pytest.raises(InputError):
        render_mask_map(ts)


def _dense_ts(T, H=6, W=6, n=1):
    tracks = []
    for oid in range(n):
        frames = [FrameAnnotation(t, mask=square_mask(H, W, t % (W - 1), oid, t % (W - 1) + 1, oid + 1))
                  for t in range(T)]
        tracks.append(_track(oid, frames))
    return TrajectorySet(tracks, (T, H, W))


def test_sparsify_examples():
    assert sparse_positions(49, 2) == [0, 48]
    nine = sparse_positions(49, 9)
    assert len(set(nine)) == 9 and nine[0] == 0 and nine[-1] == 48
    assert sparsify(_dense_ts(5), 3).tracks[0].frame_indices == [0, 2, 4]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.integers(1, 9), st.integers(1, 3))
def test_sparsify_properties(T, k, n):
    ts = _dense_ts(T, n=n)
    if k > T:
        with pytest.raises(InvalidSparsity):
            sparsify(ts, k)
        return
    sp = sparsify(ts, k)
    for tr in sp.tracks:
        assert len(tr.frames) == k
        assert tr.frames[0].mask is not None
        assert all(a.mask is None and a.bbox is not None for a in tr.frames[1:])
        if k > 1:
            assert tr.frame_indices[-1] == T - 1
    assert trajectory_eq(sparsify(sp, k), sp)
    assert np.array_equal(render_box_map(sp)[0], render_mask_map(ts)[0])


def trajectory_eq(a, b):
    return np.array_equal(render_box_map(a), render_box_map(b)) and \
        [t.frame_indices for t in a.tracks] == [t.frame_indices for t in b.tracks]


def test_sparsify_bounds():
    ts = _dense_ts(20)
    for k in (0, 10, 12):
        with pytest.raises(InvalidSparsity):
            sparsify(ts, k)


def test_trajectory_validation():
    H, W = 4, 4
    m = square_mask(H, W, 0, 0, 1, 1)
    with pytest.raises(OutOfBounds):
        TrajectorySet([_track(0, [FrameAnnotation(0, mask=m), FrameAnnotation(5, mask=m)])], (3, H, W))
    with pytest.raises(OutOfBounds):
        TrajectorySet([_track(0, [FrameAnnotation(0, mask=m), FrameAnnotation(1, bbox=(0, 0, 4, 1))])], (3, H, W))
    with pytest.raises(ValidationError):
        TrajectorySet([_track(0, [FrameAnnotation(1, mask=m)])], (3, H, W))
    with pytest.raises(ValidationError):
        FrameAnnotation(0, bbox=(0, 0, 3, 3), mask=m)
    with pytest.raises(EmptyMask):
        FrameAnnotation(0, mask=np.zeros((H, W), bool))
    with pytest.raises(ValidationError):
        TrajectorySet([_track(0, [FrameAnnotation(0, mask=m)]), _track(0, [FrameAnnotation(0, mask=m)])], (1, H, W))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_rle_roundtrip(H, W, seed):
    m = np.random.default_rng(seed).random((H, W)) < 0.4
    rle = mask_to_rle(m)
    assert np.array_equal(rle_to_mask(rle, H, W), m)
    runs = [int(x) for x in rle.split()]
    assert sum(runs) == H * W


def test_rle_starts_with_background():
    m = np.array([[True, False], [False, True]])
    assert mask_to_rle(m) == "0 1 2 1"


def test_trajectory_file_roundtrip(tmp_path):
    ts = sparsify(_dense_ts(7, n=2), 3)
    save_trajectory(ts, tmp_path / "t.json")
    back = load_trajectory(tmp_path / "t.json")
    assert back.canvas == ts.canvas and trajectory_eq(back, ts)
    assert np.array_equal(back.tracks[0].frames[0].mask, ts.tracks[0].frames[0].mask)


def test_tracks_from_masks_drops_empty_frames():
    T, H, W = 3, 5, 5
    stack = np.zeros((T, H, W), bool)
    stack[0, 1, 1] = stack[2, 3, 3] = True
    ts = tracks_from_masks([stack])
    assert ts.tracks[0].frame_indices == [0, 2]
    assert ts.tracks[0].color == assign_palette(1)[0]


def test_rendering_deterministic():
    ts = _dense_ts(6, n=3)
    assert np.array_equal(render_mask_map(ts), render_mask_map(ts))
    assert np.array_equal(render_box_map(ts), render_box_map(ts))
