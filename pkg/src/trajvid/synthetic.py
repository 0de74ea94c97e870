"""Synthetic moving-square clips with exact masks and flow, plus matching stub clients.

Clips show flat-colored squares sliding over a panning gray texture.  Pixel
values are multiples of 1/255 so clips round-trip through PNG bit-exactly,
which keeps the record/replay client caches valid after saving to disk.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clients import (ColorKeySegmenter, ExternalClients, FailingClient, PhraseTableExtractor,
                      ReplayFlowEstimator, cached)
from .videoio import save_video

OBJECT_COLORS = {
    "red square": (230, 30, 30),
    "green square": (30, 220, 40),
    "blue square": (40, 60, 235),
    "yellow square": (240, 220, 20),
    "magenta square": (225, 30, 220),
    "cyan square": (20, 225, 230),
    "orange square": (245, 140, 10),
    "white square": (250, 250, 250),
}


@dataclass
class SquareSpec:
    phrase: str
    size: int
    start: tuple[int, int]  # (x, y) top-left at frame 0
    velocity: tuple[int, int]  # pixels per frame


@dataclass
class SyntheticClip:
    video_ref: str
    caption: str
    video: np.ndarray  # (T, H, W, 3) float32
    masks: list[np.ndarray]  # per object (T, H, W) visible-pixel masks
    flows: list[np.ndarray]  # T-1 fields (H, W, 2)
    squares: list[SquareSpec] = field(default_factory=list)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8).astype(np.float32) / 255.0


def _article(phrase: str) -> str:
    return ("an " if phrase[0] in "aeiou" else "a ") + phrase


def render_squares(squares: list[SquareSpec], T: int, H: int, W: int, pan=(0, 0), seed: int = 0,
                   video_ref: str = "clip", caption: str | None = None) -> SyntheticClip:
    rng = np.random.default_rng(seed)
    px, py = pan
    margin_x, margin_y = abs(px) * T + 1, abs(py) * T + 1
    texture = rng.uniform(0.15, 0.45, size=(H + 2 * margin_y, W + 2 * margin_x))
    video = np.zeros((T, H, W, 3), dtype=np.float32)
    masks = [np.zeros((T, H, W), dtype=bool) for _ in squares]
    flows = [np.zeros((H, W, 2), dtype=np.float32) for _ in range(T - 1)]
    for t in range(T):
        # content moves by +pan per frame
        oy, ox = margin_y - t * py, margin_x - t * px
        bg = texture[oy:oy + H, ox:ox + W]
        video[t] = np.repeat(bg[..., None], 3, axis=-1)
        owner = np.full((H, W), -1)
        for i, sq in enumerate(squares):
            x = sq.start[0] + t * sq.velocity[0]
            y = sq.start[1] + t * sq.velocity[1]
            x0, y0 = max(x, 0), max(y, 0)
            x1, y1 = min(x + sq.size, W), min(y + sq.size, H)
            if x0 < x1 and y0 < y1:
                video[t, y0:y1, x0:x1] = np.asarray(OBJECT_COLORS[sq.phrase]) / 255.0
                owner[y0:y1, x0:x1] = i
        for i in range(len(squares)):
            masks[i][t] = owner == i
        if t < T - 1:
            flows[t][..., 0] = px
            flows[t][..., 1] = py
            for i, sq in enumerate(squares):
                flows[t][owner == i] = sq.velocity
    if caption is None:
        names = [sq.phrase for sq in squares]
        caption = (" and ".join(_article(n) for n in names) + " moving over a textured floor") if names else \
            "a static textured floor"
    return SyntheticClip(video_ref, caption, _quantize(video), masks, flows, list(squares))


def random_clip(rng: np.random.Generator, n_objects: int, T: int = 8, H: int = 32, W: int = 48,
                video_ref: str = "clip", speed: int = 3, pan=(3, 2)) -> SyntheticClip:
    phrases = list(rng.choice(list(OBJECT_COLORS), size=n_objects, replace=False)) if n_objects else []
    squares = []
    for ph in phrases:
        size = int(rng.integers(6, 10))
        vx = int(rng.choice([-speed, speed]))
        vy = int(rng.choice([-2, 2]))
        # keep the square fully inside the frame for all T frames
        span_x, span_y = abs(vx) * (T - 1), abs(vy) * (T - 1)
        x_lo = span_x if vx < 0 else 0
        y_lo = span_y if vy < 0 else 0
        x = int(rng.integers(x_lo, max(x_lo + 1, W - size - (span_x - x_lo) + 1)))
        y = int(rng.integers(y_lo, max(y_lo + 1, H - size - (span_y - y_lo) + 1)))
        squares.append(SquareSpec(ph, size, (x, y), (vx, vy)))
    return render_squares(squares, T, H, W, pan=pan, seed=int(rng.integers(1 << 31)), video_ref=video_ref)


def corpus(n: int = 6, seed: int = 0, T: int = 8, H: int = 32, W: int = 48,
           object_counts=(1, 2, 3, 1, 2, 4), include_static: bool = True) -> list[SyntheticClip]:
    """A small mixed corpus; object counts cycle through ``object_counts``.

    With ``include_static`` one extra clip without objects or motion is added.
    """
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        k = object_counts[i % len(object_counts)]
        clips.append(random_clip(rng, k, T, H, W, video_ref=f"clip{i:03d}"))
    if include_static:
        clips.append(render_squares([], T, H, W, pan=(0, 0), seed=seed + 991,
                                    video_ref=f"clip{n:03d}", caption="a static landscape"))
    return clips


def stub_clients(clips: list[SyntheticClip]) -> ExternalClients:
    """Phrase-table extractor, color-key segmenter and flow replay primed with the clips' true flow."""
    flow = ReplayFlowEstimator()
    for c in clips:
        for t, f in enumerate(c.flows):
            flow.record(c.video[t], c.video[t + 1], f)
    return ExternalClients(PhraseTableExtractor(list(OBJECT_COLORS)),
                           ColorKeySegmenter({k: np.asarray(v) / 255.0 for k, v in OBJECT_COLORS.items()}),
                           flow)


def replay_clients(cache_dir) -> ExternalClients:
    """Replay-only clients: every request must already be in ``cache_dir``."""
    dead = FailingClient()
    return cached(ExternalClients(dead, dead, dead), cache_dir)


def write_fixture(directory, clips: list[SyntheticClip] | None = None, cache_dir=None) -> Path:
    """Write clips as PNG frame directories, a caption manifest and a primed client cache.

    Layout: ``videos/<ref>/frame_*.png``, ``captions.jsonl`` (video_ref paths
    relative to ``directory``) and ``client_cache/``.
    """
    directory = Path(directory)
    clips = clips if clips is not None else corpus()
    cache_dir = Path(cache_dir) if cache_dir else directory / "client_cache"
    recorder = cached(stub_clients(clips), cache_dir)
    rows = []
    for c in clips:
        save_video(c.video, directory / "videos" / c.video_ref)
        rows.append({"video_ref": f"videos/{c.video_ref}", "caption": c.caption})
        # prime every request curate will make
        phrases = recorder.object_extractor.extract(c.caption)
        for t in range(len(c.video) - 1):
            recorder.flow_estimator.flow(c.video[t], c.video[t + 1])
        if isinstance(phrases, list):
            recorder.grounded_segmenter.segment(c.video, phrases)
    (directory / "captions.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    return directory
