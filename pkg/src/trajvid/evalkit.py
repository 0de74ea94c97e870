"""Trajectory-control evaluation: Mask_IoU / Box_IoU per object-count bucket.

A tracker is seeded with the ground-truth first-frame masks and propagates
them through the generated clip; per-object, per-frame IoUs against the
ground truth are averaged (frame 0 included).  Two empty rasters count as a
perfect match.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .clients import TrackerClient, _post
from .datapipe import BUCKET_KEYS, TripletRecord, bucket_key
from .errors import ClientError, InputError, ShapeError
from .trajgeo import TrajectorySet, box_to_mask, extract_bbox, trajectory_from_json, trajectory_to_json, \
    tracks_from_masks


def frame_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"frame_iou: shapes {a.shape} and {b.shape} differ")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _mask_stacks(tracks) -> dict[int, np.ndarray]:
    if isinstance(tracks, TrajectorySet):
        return tracks.mask_tracks()
    return {int(k): np.asarray(v, dtype=bool) for k, v in tracks.items()}


def _box_stacks(tracks) -> dict[int, np.ndarray]:
    """Filled tight boxes per frame; frames without a box stay empty."""
    if isinstance(tracks, TrajectorySet):
        T, H, W = tracks.canvas
        out = {}
        for oid, boxes in tracks.box_tracks().items():
            stack = np.zeros((T, H, W), dtype=bool)
            for t, b in enumerate(boxes):
                if b is not None:
                    stack[t] = box_to_mask(b, H, W)
            out[oid] = stack
        return out
    out = {}
    for oid, stack in _mask_stacks(tracks).items():
        boxes = np.zeros_like(stack)
        for t, m in enumerate(stack):
            if m.any():
                boxes[t] = box_to_mask(extract_bbox(m), *m.shape)
        out[oid] = boxes
    return out


def iou_matrix(pred: Mapping[int, np.ndarray], gt: Mapping[int, np.ndarray]) -> np.ndarray:
    """(objects, frames) IoU matrix, rows in ascending object id."""
    if set(pred) != set(gt):
        raise InputError(f"object ids differ: pred {sorted(pred)} vs gt {sorted(gt)}")
    rows = []
    for oid in sorted(gt):
        p, g = pred[oid], gt[oid]
        if p.shape != g.shape:
            raise InputError(f"object {oid}: pred {p.shape} vs gt {g.shape}")
        rows.append([frame_iou(p[t], g[t]) for t in range(g.shape[0])])
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)


def mask_iou(pred_tracks, gt_tracks) -> float:
    return float(iou_matrix(_mask_stacks(pred_tracks), _mask_stacks(gt_tracks)).mean())


def box_iou(pred_tracks, gt_tracks) -> float:
    return float(iou_matrix(_box_stacks(pred_tracks), _box_stacks(gt_tracks)).mean())


# -- trackers -------------------------------------------------------------------


class OracleTracker:
    """Returns the ground-truth masks regardless of the video content."""

    def __init__(self, records: Sequence[TripletRecord]):
        self.gt = {r.video_ref: r.trajectory for r in records}

    def propagate(self, video, first_frame_masks, video_ref=None):
        if video_ref not in self.gt:
            raise ClientError(f"oracle has no ground truth for {video_ref!r}")
        return self.gt[video_ref].mask_tracks()


class FrozenFirstFrameTracker:
    """Repeats the seed masks on every frame."""

    def propagate(self, video, first_frame_masks, video_ref=None):
        T = np.asarray(video).shape[0]
        return {k: np.repeat(np.asarray(m, bool)[None], T, axis=0) for k, m in first_frame_masks.items()}


class ColorMatchTracker:
    """Follows each object by the median color of its seed region.

    Works on synthetic clips where objects are flat-colored; pixels within
    ``tol`` (max channel difference) of the seed color form the mask.
    """

    def __init__(self, tol: float = 0.12):
        self.tol = tol

    def propagate(self, video, first_frame_masks, video_ref=None):
        video = np.asarray(video, dtype=np.float32)
        out = {}
        for k, m in first_frame_masks.items():
            m = np.asarray(m, bool)
            if not m.any():
                out[k] = np.zeros(video.shape[:3], dtype=bool)
                continue
            color = np.median(video[0][m], axis=0)
            out[k] = np.abs(video - color).max(axis=-1) <= self.tol
            out[k][0] = m
        return out


class HttpTracker:
    """``{"video_ref", "first_frame": trajectory-JSON}`` -> ``{"tracks": trajectory-JSON}``."""

    def __init__(self, url: str, timeout: float = 600.0):
        self.url, self.timeout = url, timeout

    def propagate(self, video, first_frame_masks, video_ref=None):
        T, H, W = np.asarray(video).shape[:3]
        ids = sorted(first_frame_masks)
        seeds = [np.asarray(first_frame_masks[k], bool)[None] for k in ids]
        seed_doc = trajectory_to_json(tracks_from_masks(seeds)) if seeds else {"canvas": [1, H, W], "tracks": []}
        resp = _post(self.url, {"video_ref": video_ref, "first_frame": seed_doc}, self.timeout)
        try:
            masks = trajectory_from_json(resp["tracks"]).mask_tracks()
        except (KeyError, TypeError, ValueError) as exc:
            raise ClientError(f"malformed tracker response: {exc}") from exc
        return {ids[i]: masks[i] for i in range(len(ids)) if i in masks}


# -- evaluation -----------------------------------------------------------------


@dataclass
class IoUReport:
    bucket_id: str
    n_videos: int
    mask_iou: Optional[float]
    box_iou: Optional[float]
    per_object_per_frame_iou: list[list[float]] = field(default_factory=list)
    per_object_per_frame_box_iou: list[list[float]] = field(default_factory=list)


@dataclass
class EvalReport:
    overall: IoUReport
    buckets: dict[str, IoUReport]
    errors: list[dict]

    def to_json(self, include_matrices: bool = False) -> dict:
        def strip(r: IoUReport) -> dict:
            d = asdict(r)
            if not include_matrices:
                d.pop("per_object_per_frame_iou")
                d.pop("per_object_per_frame_box_iou")
            return d

        return {"overall": strip(self.overall), "buckets": {k: strip(v) for k, v in self.buckets.items()},
                "errors": list(self.errors)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(True), sort_keys=True).encode()).hexdigest()

    def write(self, path, csv_path=None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        if csv_path:
            Path(csv_path).write_text(self.to_csv())
        return path

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["bucket", "n_videos", "M_IoU%", "B_IoU%"])
        for key, rep in [*self.buckets.items(), ("overall", self.overall)]:
            fmt = (lambda v: "" if v is None else f"{100 * v:.2f}")
            w.writerow([key, rep.n_videos, fmt(rep.mask_iou), fmt(rep.box_iou)])
        return buf.getvalue()


def _aggregate(key: str, results: list[tuple[np.ndarray, np.ndarray]]) -> IoUReport:
    if not results:
        return IoUReport(key, 0, None, None)
    m_rows = [row for m, _ in results for row in m.tolist()]
    b_rows = [row for _, b in results for row in b.tolist()]
    m_all = np.concatenate([m.ravel() for m, _ in results])
    b_all = np.concatenate([b.ravel() for _, b in results])
    return IoUReport(key, len(results), float(m_all.mean()), float(b_all.mean()), m_rows, b_rows)


def evaluate_one(video, gt: TripletRecord, tracker: TrackerClient) -> tuple[np.ndarray, np.ndarray]:
    ts = gt.trajectory
    video = np.asarray(video, dtype=np.float32)
    if tuple(video.shape[:3]) != ts.canvas:
        raise InputError(f"{gt.video_ref}: generated clip {video.shape[:3]} vs canvas {ts.canvas}")
    gt_masks = ts.mask_tracks()
    seeds = {k: v[0] for k, v in gt_masks.items()}
    pred = tracker.propagate(video, seeds, video_ref=gt.video_ref)
    pred = {int(k): np.asarray(v, dtype=bool) for k, v in pred.items()}
    if set(pred) != set(seeds):
        raise ClientError(f"tracker returned objects {sorted(pred)}, expected {sorted(seeds)}")
    return iou_matrix(pred, gt_masks), iou_matrix(_box_stacks(pred), _box_stacks(ts))


def evaluate(videos: Mapping[str, np.ndarray], gt: Sequence[TripletRecord], tracker: TrackerClient,
             workers: int = 1) -> EvalReport:
    """Score generated clips (keyed by video_ref) against ground-truth records."""
    if len(videos) != len(gt):
        raise InputError(f"{len(videos)} generated clips for {len(gt)} ground-truth records")
    missing = [r.video_ref for r in gt if r.video_ref not in videos]
    if missing:
        raise InputError(f"no generated clip for {missing}")

    def one(rec):
        try:
            return rec, evaluate_one(videos[rec.video_ref], rec, tracker), None
        except (ClientError, InputError) as exc:
            return rec, None, {"video_ref": rec.video_ref, "error": str(exc)}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, gt))
    else:
        results = [one(r) for r in gt]
    per_bucket: dict[str, list] = {k: [] for k in BUCKET_KEYS}
    everything, errors = [], []
    for rec, res, err in results:
        if err is not None:
            errors.append(err)
            continue
        per_bucket[bucket_key(rec.trajectory.object_count)].append(res)
        everything.append(res)
    buckets = {k: _aggregate(k, v) for k, v in per_bucket.items()}
    return EvalReport(_aggregate("overall", everything), buckets, errors)
