"""Object trajectories and their rendering into RGB condition videos.

A condition video has shape (T, H, W, 3) with values in [0, 1]; background is
black and each object is painted in its own palette color.  Three renderings
are supported: dense masks, filled boxes, and sparse boxes (a few keyframes).
Frame 0 is always rendered from masks so the moving objects are identified.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from math import ceil
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (EmptyMask, InputError, InvalidSparsity, OutOfBounds,
                     PaletteExhausted, ValidationError)

Box = tuple[int, int, int, int]
MAX_OBJECTS = 255
MAX_SPARSE_FRAMES = 9


def extract_bbox(mask) -> Box:
    """Tight inclusive box ``(x0, y0, x1, y1)`` of the foreground of a 2D mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2D, got shape {mask.shape}")
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyMask("mask has no foreground pixels")
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def box_to_mask(box: Box, height: int, width: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    out = np.zeros((height, width), dtype=bool)
    out[y0:y1 + 1, x0:x1 + 1] = True
    return out


@lru_cache(maxsize=1)
def _palette_table() -> tuple[tuple[int, int, int], ...]:
    # greedy farthest-point pick on a 16-level RGB grid; black seeds the set
    # so every pick is far from the background
    levels = np.arange(16) * 17
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), -1).reshape(-1, 3)
    grid = grid.astype(np.int64)
    dist = ((grid - 0) ** 2).sum(1)
    picks = []
    for _ in range(MAX_OBJECTS):
        i = int(np.argmax(dist))
        picks.append(tuple(int(c) for c in grid[i]))
        dist = np.minimum(dist, ((grid - grid[i]) ** 2).sum(1))
    return tuple(picks)


def assign_palette(n: int) -> list[tuple[int, int, int]]:
    """First ``n`` entries of a fixed, maximally separated color table."""
    if n < 0:
        raise ValidationError("object count must be >= 0")
    if n > MAX_OBJECTS:
        raise PaletteExhausted(f"palette holds {MAX_OBJECTS} colors, {n} requested")
    return list(_palette_table()[:n])


@dataclass
class FrameAnnotation:
    frame_index: int
    bbox: Optional[Box] = None
    mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.bbox is None and self.mask is None:
            raise ValidationError(f"frame {self.frame_index}: needs a bbox or a mask")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            tight = extract_bbox(self.mask)
            if self.bbox is not None and tuple(self.bbox) != tight:
                raise ValidationError(
                    f"frame {self.frame_index}: bbox {self.bbox} is not the tight box {tight} of its mask")
        if self.bbox is not None:
            self.bbox = tuple(int(v) for v in self.bbox)
            x0, y0, x1, y1 = self.bbox
            if x0 > x1 or y0 > y1:
                raise ValidationError(f"frame {self.frame_index}: malformed bbox {self.bbox}")

    def box(self) -> Box:
        return self.bbox if self.bbox is not None else extract_bbox(self.mask)


@dataclass
class ObjectTrack:
    object_id: int
    color: tuple[int, int, int]
    frames: list[FrameAnnotation]

    def __post_init__(self):
        if self.object_id < 0:
            raise ValidationError("object_id must be >= 0")
        self.color = tuple(int(c) for c in self.color)
        if len(self.color) != 3 or not all(0 <= c <= 255 for c in self.color):
            raise ValidationError(f"bad color {self.color}")
        idx = [a.frame_index for a in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValidationError(f"track {self.object_id}: frame indices must be strictly increasing")

    @property
    def frame_indices(self) -> list[int]:
        return [a.frame_index for a in self.frames]

    def annotation(self, t: int) -> Optional[FrameAnnotation]:
        for a in self.frames:
            if a.frame_index == t:
                return a
        return None


@dataclass
class TrajectorySet:
    tracks: list[ObjectTrack]
    canvas: tuple[int, int, int]  # (T, H, W)

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)
        T, H, W = self.canvas
        if min(self.canvas) <= 0:
            raise ValidationError(f"canvas dims must be positive, got {self.canvas}")
        ids = [tr.object_id for tr in self.tracks]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate object ids {ids}")
        for tr in self.tracks:
            for a in tr.frames:
                if not 0 <= a.frame_index < T:
                    raise OutOfBounds(f"track {tr.object_id}: frame {a.frame_index} outside [0, {T})")
                if a.mask is not None and a.mask.shape != (H, W):
                    raise OutOfBounds(f"track {tr.object_id}: mask shape {a.mask.shape} != {(H, W)}")
                if a.bbox is not None:
                    x0, y0, x1, y1 = a.bbox
                    if x0 < 0 or y0 < 0 or x1 >= W or y1 >= H:
                        raise OutOfBounds(f"track {tr.object_id}: bbox {a.bbox} outside {W}x{H} canvas")
            first = tr.annotation(0)
            if first is None or first.mask is None:
                raise ValidationError(f"track {tr.object_id}: frame 0 must carry a mask")

    @property
    def object_count(self) -> int:
        return len(self.tracks)

    def sorted_tracks(self) -> list[ObjectTrack]:
        return sorted(self.tracks, key=lambda tr: tr.object_id)

    def mask_tracks(self) -> dict[int, np.ndarray]:
        """object_id -> (T, H, W) bool masks; unannotated or box-only frames are empty."""
        T, H, W = self.canvas
        out = {}
        for tr in self.sorted_tracks():
            m = np.zeros((T, H, W), dtype=bool)
            for a in tr.frames:
                if a.mask is not None:
                    m[a.frame_index] = a.mask
            out[tr.object_id] = m
        return out

    def box_tracks(self) -> dict[int, list[Optional[Box]]]:
        T = self.canvas[0]
        out = {}
        for tr in self.sorted_tracks():
            boxes: list[Optional[Box]] = [None] * T
            for a in tr.frames:
                boxes[a.frame_index] = a.box()
            out[tr.object_id] = boxes
        return out


def _blank(ts: TrajectorySet) -> np.ndarray:
    T, H, W = ts.canvas
    return np.zeros((T, H, W, 3), dtype=np.float32)


def _paint_mask(frame: np.ndarray, mask: np.ndarray, color) -> None:
    frame[mask] = np.asarray(color, dtype=np.float32) / 255.0


def _paint_box(frame: np.ndarray, box: Box, color) -> None:
    x0, y0, x1, y1 = box
    frame[y0:y1 + 1, x0:x1 + 1] = np.asarray(color, dtype=np.float32) / 255.0


def render_mask_map(ts: TrajectorySet) -> np.ndarray:
    """Paint every track's masks in its color, ascending object_id (last wins)."""
    out = _blank(ts)
    for tr in ts.sorted_tracks():
        for a in tr.frames:
            if a.mask is None:
                raise InputError(f"track {tr.object_id} frame {a.frame_index} has no mask")
            _paint_mask(out[a.frame_index], a.mask, tr.color)
    return out


def render_box_map(ts: TrajectorySet) -> np.ndarray:
    """Filled boxes per annotated frame; frame 0 is painted from masks."""
    out = _blank(ts)
    for tr in ts.sorted_tracks():
        for a in tr.frames:
            if a.frame_index == 0:
                _paint_mask(out[0], a.mask, tr.color)
            else:
                _paint_box(out[a.frame_index], a.box(), tr.color)
    return out


def sparse_positions(n: int, k: int) -> list[int]:
    """k evenly spaced positions in range(n), endpoints pinned, ties to the lower index."""
    if k == 1:
        return [0]
    step = Fraction(n - 1, k - 1)
    # ceil(x - 1/2) rounds half down
    return [int(ceil(i * step - Fraction(1, 2))) for i in range(k)]


def sparsify(ts: TrajectorySet, k: int) -> TrajectorySet:
    """Keep exactly ``k`` annotated frames per track; only frame 0 keeps its mask."""
    if not 1 <= k <= MAX_SPARSE_FRAMES:
        raise InvalidSparsity(f"k must be in [1, {MAX_SPARSE_FRAMES}], got {k}")
    tracks = []
    for tr in ts.tracks:
        n = len(tr.frames)
        if n < k:
            raise InvalidSparsity(f"track {tr.object_id} has {n} annotated frames, fewer than k={k}")
        kept = []
        for pos in sparse_positions(n, k):
            a = tr.frames[pos]
            if a.frame_index == 0:
                kept.append(a)
            else:
                kept.append(FrameAnnotation(a.frame_index, bbox=a.box()))
        tracks.append(replace(tr, frames=kept))
    return TrajectorySet(tracks, ts.canvas)


# -- serialization ---------------------------------------------------------

def mask_to_rle(mask) -> str:
    """Row-major run lengths alternating background/foreground, background first."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return ""
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return " ".join(str(r) for r in runs)


def rle_to_mask(rle: str, height: int, width: int) -> np.ndarray:
    runs = [int(x) for x in rle.split()]
    if sum(runs) != height * width:
        raise ValidationError(f"RLE covers {sum(runs)} pixels, canvas has {height * width}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(height, width)


def trajectory_to_json(ts: TrajectorySet) -> dict:
    tracks = []
    for tr in ts.sorted_tracks():
        frames = []
        for a in tr.frames:
            frames.append({
                "index": a.frame_index,
                "bbox": list(a.bbox) if a.bbox is not None else None,
                "mask_rle": mask_to_rle(a.mask) if a.mask is not None else None,
            })
        tracks.append({"object_id": tr.object_id, "color": list(tr.color), "frames": frames})
    return {"canvas": list(ts.canvas), "tracks": tracks}


def trajectory_from_json(doc: dict) -> TrajectorySet:
    T, H, W = doc["canvas"]
    tracks = []
    for t in doc["tracks"]:
        frames = []
        for f in t["frames"]:
            mask = rle_to_mask(f["mask_rle"], H, W) if f.get("mask_rle") is not None else None
            bbox = tuple(f["bbox"]) if f.get("bbox") is not None else None
            frames.append(FrameAnnotation(int(f["index"]), bbox=bbox, mask=mask))
        tracks.append(ObjectTrack(int(t["object_id"]), tuple(t["color"]), frames))
    return TrajectorySet(tracks, (T, H, W))


def save_trajectory(ts: TrajectorySet, path) -> None:
    Path(path).write_text(json.dumps(trajectory_to_json(ts), separators=(",", ":")))


def load_trajectory(path) -> TrajectorySet:
    return trajectory_from_json(json.loads(Path(path).read_text()))


def tracks_from_masks(masks: Sequence[np.ndarray]) -> TrajectorySet:
    """Build a TrajectorySet from per-object (T, H, W) mask stacks.

    Empty frames become unannotated; each annotated frame carries its mask and
    tight box.  Colors come from :func:`assign_palette` indexed by object id.
    """
    if not masks:
        raise InputError("need at least one mask stack to size the canvas")
    canvas = np.asarray(masks[0]).shape
    colors = assign_palette(len(masks))
    tracks = []
    for oid, stack in enumerate(masks):
        stack = np.asarray(stack, dtype=bool)
        if stack.shape != canvas:
            raise OutOfBounds(f"object {oid}: mask stack {stack.shape} != {canvas}")
        frames = [FrameAnnotation(t, bbox=extract_bbox(stack[t]), mask=stack[t])
                  for t in range(stack.shape[0]) if stack[t].any()]
        tracks.append(ObjectTrack(oid, colors[oid], frames))
    return TrajectorySet(tracks, canvas)
