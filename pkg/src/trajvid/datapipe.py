"""Dataset curation, filtering and benchmark bucketing.

Curation turns (video, caption) pairs into trajectory triplets using the
external clients; filtering keeps clips with enough global and foreground
motion, 1-3 objects and a sane annotated area; bucketing splits kept records
by object count into six groups.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .clients import EMPTY_RESPONSE, ExternalClients
from .errors import ClientError, InputError, UndefinedScore, ValidationError
from .trajgeo import (TrajectorySet, load_trajectory, save_trajectory,
                      tracks_from_masks)

BUCKET_KEYS = ("1", "2", "3", "4", "5", "gt5")
REJECT_ORDER = ("low_motion", "fg_motion", "object_count", "area_ratio")


@dataclass
class Diagnostics:
    flow_score: float
    fg_flow_scores: list[float]
    object_count: int
    area_ratio: float


@dataclass
class FilterThresholds:
    min_flow: float = 2.0
    object_count_range: tuple[int, int] = (1, 3)
    area_ratio_range: tuple[float, float] = (0.008, 0.83)
    min_fg_flow: float = 2.0

    def __post_init__(self):
        lo, hi = self.object_count_range
        alo, ahi = self.area_ratio_range
        if lo > hi or alo > ahi:
            raise ValidationError("threshold ranges must be nonempty")
        if self.min_flow <= 0 or self.min_fg_flow <= 0:
            raise ValidationError("flow thresholds must be positive")


@dataclass
class TripletRecord:
    video_ref: str
    caption: str
    trajectory: Optional[TrajectorySet] = None
    diagnostics: Optional[Diagnostics] = None
    status: str = "pending"  # pending | kept | rejected
    reason: Optional[str] = None
    video: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def status_label(self) -> str:
        return f"rejected({self.reason})" if self.status == "rejected" else self.status

    def reject(self, reason: str) -> "TripletRecord":
        self.status, self.reason = "rejected", reason
        return self


# -- scores -------------------------------------------------------------------


def extract_objects(caption: str, client) -> list[str]:
    if not caption or not caption.strip():
        raise InputError("caption must be nonempty")
    resp = client.extract(caption)
    if isinstance(resp, str):
        resp = [resp]
    phrases = [p.strip() for p in resp if p and p.strip()]
    if [p.lower() for p in phrases] == [EMPTY_RESPONSE]:
        return []
    return phrases


def flow_score(flow_fields: Sequence[np.ndarray], mask=None) -> float:
    """Mean |flow component|; with masks, pooled over foreground pixels of each field.

    ``mask`` is one (H, W) raster applied to every field or a sequence of one
    raster per field.  Fields whose mask is empty are skipped.
    """
    if len(flow_fields) == 0:
        raise InputError("need at least one flow field")
    if mask is None:
        return float(np.mean([np.abs(np.asarray(f, dtype=np.float64)).mean() for f in flow_fields]))
    masks = [mask] * len(flow_fields) if np.asarray(mask).ndim == 2 else list(mask)
    if len(masks) != len(flow_fields):
        raise InputError(f"{len(masks)} masks for {len(flow_fields)} flow fields")
    total, count = 0.0, 0
    for f, m in zip(flow_fields, masks):
        f = np.asarray(f, dtype=np.float64)
        m = np.asarray(m, dtype=bool)
        if m.shape != f.shape[:2]:
            raise InputError(f"mask shape {m.shape} does not match flow {f.shape[:2]}")
        if not m.any():
            continue
        sel = np.abs(f[m])
        total += sel.sum()
        count += sel.size
    if count == 0:
        raise UndefinedScore("every mask is empty")
    return float(total / count)


def area_ratio(ts: TrajectorySet) -> float:
    """Mean over annotated frames of the union foreground fraction."""
    T, H, W = ts.canvas
    union = np.zeros((T, H, W), dtype=bool)
    annotated = np.zeros(T, dtype=bool)
    for tr in ts.tracks:
        for a in tr.frames:
            annotated[a.frame_index] = True
            if a.mask is not None:
                union[a.frame_index] |= a.mask
            else:
                x0, y0, x1, y1 = a.bbox
                union[a.frame_index, y0:y1 + 1, x0:x1 + 1] = True
    if not annotated.any():
        raise UndefinedScore("trajectory has no annotated frames")
    return float(union[annotated].mean(axis=(1, 2)).mean())


def filter_record(r: TripletRecord, th: FilterThresholds | None = None) -> TripletRecord:
    """Decide kept/rejected; the first failing check (in REJECT_ORDER) names the reason."""
    th = th or FilterThresholds()
    d = r.diagnostics
    if d is None:
        raise InputError(f"{r.video_ref}: diagnostics missing")
    if r.status == "rejected" and r.reason in ("no_foreground", "client_error"):
        return r
    lo, hi = th.object_count_range
    alo, ahi = th.area_ratio_range
    if d.flow_score < th.min_flow:
        return r.reject("low_motion")
    if d.fg_flow_scores and min(d.fg_flow_scores) < th.min_fg_flow:
        return r.reject("fg_motion")
    if not lo <= d.object_count <= hi:
        return r.reject("object_count")
    if not alo <= d.area_ratio <= ahi:
        return r.reject("area_ratio")
    r.status, r.reason = "kept", None
    return r


# -- curation -------------------------------------------------------------------


def _diagnostics(video: np.ndarray, masks: list[np.ndarray], ts: TrajectorySet | None,
                 flows: list[np.ndarray]) -> Diagnostics:
    fg = []
    for m in masks:
        try:
            fg.append(flow_score(flows, list(m[:-1])))
        except UndefinedScore:
            fg.append(0.0)
    area = area_ratio(ts) if ts is not None and ts.tracks else 0.0
    return Diagnostics(flow_score(flows), fg, len(masks), area)


def curate(video, caption: str, clients: ExternalClients, video_ref: str = "") -> TripletRecord:
    """Annotate one clip: objects -> masks -> boxes/colors, plus filter diagnostics.

    Objects whose first-frame mask is empty are dropped since they cannot seed
    a trajectory.  Client failures yield a record rejected with ``client_error``.
    """
    video = np.asarray(video, dtype=np.float32)
    if video.ndim != 4 or video.shape[0] < 2:
        raise InputError(f"need a (T>=2, H, W, 3) clip, got {video.shape}")
    rec = TripletRecord(video_ref, caption, video=video)
    T, H, W, _ = video.shape
    try:
        phrases = extract_objects(caption, clients.object_extractor)
        flows = [np.asarray(clients.flow_estimator.flow(video[i], video[i + 1])) for i in range(T - 1)]
        for f in flows:
            if f.shape != (H, W, 2):
                raise ClientError(f"flow field has shape {f.shape}, expected {(H, W, 2)}")
        if not phrases:
            rec.trajectory = TrajectorySet([], (T, H, W))
            rec.diagnostics = Diagnostics(flow_score(flows), [], 0, 0.0)
            return rec.reject("no_foreground")
        masks = [np.asarray(m, dtype=bool) for m in
                 clients.grounded_segmenter.segment(video, phrases, video_ref=video_ref)]
    except ClientError:
        rec.diagnostics = Diagnostics(0.0, [], 0, 0.0)
        return rec.reject("client_error")
    for m in masks:
        if m.shape != (T, H, W):
            rec.diagnostics = Diagnostics(0.0, [], 0, 0.0)
            return rec.reject("client_error")
    masks = [m for m in masks if m[0].any()]
    rec.trajectory = tracks_from_masks(masks) if masks else TrajectorySet([], (T, H, W))
    rec.diagnostics = _diagnostics(video, masks, rec.trajectory, flows)
    return rec


def curate_many(items: Iterable[tuple[str, np.ndarray, str]], clients: ExternalClients,
                th: FilterThresholds | None = None, workers: int = 1) -> list[TripletRecord]:
    """Curate and filter (video_ref, video, caption) items; output order follows input order."""
    def one(item):
        ref, video, caption = item
        rec = curate(video, caption, clients, video_ref=ref)
        return filter_record(rec, th)

    items = list(items)
    if workers <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, items))


# -- benchmark -------------------------------------------------------------------


def bucket_key(n: int) -> str:
    if n < 1:
        raise InputError(f"record with {n} objects cannot be bucketed")
    return str(n) if n <= 5 else "gt5"


@dataclass
class Benchmark:
    buckets: dict[str, list[TripletRecord]]
    overflow: list[TripletRecord]

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.buckets.items()}

    def bucket_of(self, video_ref: str) -> Optional[str]:
        for k, recs in self.buckets.items():
            if any(r.video_ref == video_ref for r in recs):
                return k
        return None


def build_benchmark(records: Sequence[TripletRecord], capacity: int = 100) -> Benchmark:
    """Partition records into object-count buckets; records past a full bucket go to overflow."""
    buckets: dict[str, list[TripletRecord]] = {k: [] for k in BUCKET_KEYS}
    overflow = []
    for r in records:
        if r.status != "kept":
            raise InputError(f"{r.video_ref}: only kept records can be bucketed (status {r.status_label})")
        n = r.trajectory.object_count if r.trajectory is not None else 0
        key = bucket_key(n)
        (buckets[key] if len(buckets[key]) < capacity else overflow).append(r)
    return Benchmark(buckets, overflow)


# -- manifests -------------------------------------------------------------------


def read_caption_manifest(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            row = json.loads(line)
            if "video_ref" not in row or "caption" not in row:
                raise InputError(f"caption manifest row lacks video_ref/caption: {row}")
            rows.append(row)
    return rows


def record_to_json(r: TripletRecord, trajectory_file: Optional[str]) -> dict:
    return {"video_ref": r.video_ref, "caption": r.caption, "trajectory_file": trajectory_file,
            "diagnostics": asdict(r.diagnostics) if r.diagnostics else None, "status": r.status_label}


def _safe_name(ref: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in ref) or "video"


def write_manifest(records: Sequence[TripletRecord], path, trajectory_dir=None) -> Path:
    """Write JSON Lines triplets; trajectory files go next to the manifest by default."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tdir = Path(trajectory_dir) if trajectory_dir else path.parent / "trajectories"
    tdir.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        tfile = None
        if r.trajectory is not None:
            target = tdir / f"{_safe_name(r.video_ref)}.json"
            save_trajectory(r.trajectory, target)
            tfile = os.path.relpath(target, path.parent)
        lines.append(json.dumps(record_to_json(r, tfile), sort_keys=True))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + ("\n" if lines else ""))
    os.replace(tmp, path)
    return path


def _parse_status(label: str) -> tuple[str, Optional[str]]:
    if label.startswith("rejected(") and label.endswith(")"):
        return "rejected", label[len("rejected("):-1]
    return label, None


def read_manifest(path) -> list[TripletRecord]:
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        ts = load_trajectory(path.parent / row["trajectory_file"]) if row.get("trajectory_file") else None
        diag = Diagnostics(**row["diagnostics"]) if row.get("diagnostics") else None
        status, reason = _parse_status(row.get("status", "pending"))
        out.append(TripletRecord(row["video_ref"], row["caption"], ts, diag, status, reason))
    return out


def write_benchmark(bench: Benchmark, directory) -> Path:
    """One manifest per bucket (``bucket_<key>.jsonl``) plus ``buckets.json`` counts."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tdir = directory / "trajectories"
    for key, recs in bench.buckets.items():
        write_manifest(recs, directory / f"bucket_{key}.jsonl", tdir)
    (directory / "buckets.json").write_text(json.dumps(
        {"counts": bench.counts(), "overflow": len(bench.overflow)}, indent=1, sort_keys=True))
    return directory


def read_benchmark(directory) -> dict[str, list[TripletRecord]]:
    directory = Path(directory)
    return {k: read_manifest(directory / f"bucket_{k}.jsonl") for k in BUCKET_KEYS
            if (directory / f"bucket_{k}.jsonl").exists()}
