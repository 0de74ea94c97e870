"""Narrow interfaces to the external models used by curation and evaluation.

Three roles are needed for curation: an object extractor (caption -> phrases),
a grounded segmenter (video + phrases -> per-object mask stacks) and a flow
estimator (frame pair -> (H, W, 2) flow).  Evaluation needs a mask tracker.
Each role has an HTTP-JSON binding, deterministic stubs for hermetic runs,
and a record/replay cache keyed by input digest.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from . import tensorio
from .errors import ClientError
from .trajgeo import trajectory_from_json

EMPTY_RESPONSE = "empty"


class ObjectExtractor(Protocol):
    def extract(self, caption: str) -> list[str] | str: ...


class GroundedSegmenter(Protocol):
    def segment(self, video: np.ndarray, phrases: Sequence[str],
                video_ref: Optional[str] = None) -> list[np.ndarray]: ...


class FlowEstimator(Protocol):
    def flow(self, frame_a: np.ndarray, frame_b: np.ndarray) -> np.ndarray: ...


class TrackerClient(Protocol):
    def propagate(self, video: np.ndarray, first_frame_masks: Mapping[int, np.ndarray],
                  video_ref: Optional[str] = None) -> dict[int, np.ndarray]: ...


class QualityScorer(Protocol):
    """Distribution-level quality score (e.g. FID/FVD) between two sets of clips."""

    def score(self, generated: Sequence[np.ndarray], reference: Sequence[np.ndarray]) -> float: ...


@dataclass
class ExternalClients:
    object_extractor: ObjectExtractor
    grounded_segmenter: GroundedSegmenter
    flow_estimator: FlowEstimator


def digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            arr = np.ascontiguousarray(p)
            h.update(str(arr.dtype).encode())
            h.update(repr(arr.shape).encode())
            h.update(arr.tobytes())
        else:
            h.update(json.dumps(p, sort_keys=True).encode())
        h.update(b"|")
    return h.hexdigest()


# -- stubs ------------------------------------------------------------------


class PhraseTableExtractor:
    """Returns known object words in caption order; ``"empty"`` when none match."""

    def __init__(self, vocabulary: Sequence[str]):
        self.vocabulary = list(vocabulary)

    def extract(self, caption: str) -> list[str] | str:
        hits = []
        for phrase in self.vocabulary:
            m = re.search(r"\b" + re.escape(phrase) + r"\b", caption.lower())
            if m:
                hits.append((m.start(), phrase))
        return [p for _, p in sorted(hits)] or EMPTY_RESPONSE


class ColorKeySegmenter:
    """Segments each phrase as the pixels within ``tol`` of a known RGB color (0-1 scale)."""

    def __init__(self, colors: Mapping[str, Sequence[float]], tol: float = 0.08):
        self.colors = {k: np.asarray(v, dtype=np.float32) for k, v in colors.items()}
        self.tol = tol

    def segment(self, video, phrases, video_ref=None):
        video = np.asarray(video, dtype=np.float32)
        out = []
        for ph in phrases:
            if ph not in self.colors:
                raise ClientError(f"segmenter does not know {ph!r}")
            out.append(np.abs(video - self.colors[ph]).max(axis=-1) <= self.tol)
        return out


class ReplayFlowEstimator:
    """Looks up precomputed flow fields by frame-pair digest."""

    def __init__(self, table: Optional[dict[str, np.ndarray]] = None):
        self.table = dict(table or {})

    def record(self, frame_a, frame_b, flow) -> None:
        self.table[digest(np.asarray(frame_a, np.float32), np.asarray(frame_b, np.float32))] = np.asarray(flow)

    def flow(self, frame_a, frame_b):
        key = digest(np.asarray(frame_a, np.float32), np.asarray(frame_b, np.float32))
        if key not in self.table:
            raise ClientError("no recorded flow for this frame pair")
        return self.table[key]


class FailingClient:
    """Raises ClientError on every call; for exercising error paths."""

    def __getattr__(self, name):
        def fail(*args, **kwargs):
            raise ClientError(f"{name} unavailable")
        return fail


# -- record/replay cache ------------------------------------------------------


class _Cache:
    def __init__(self, cache_dir: Optional[str | os.PathLike] = None):
        self.memory: dict[str, object] = {}
        self.dir = Path(cache_dir) if cache_dir else None
        self.lock = threading.Lock()
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def get(self, key):
        with self.lock:
            if key in self.memory:
                return self.memory[key]
        if self.dir:
            path = self.dir / f"{key}.npz"
            if path.exists():
                with np.load(path, allow_pickle=False) as z:
                    value = self._unpack(z)
                with self.lock:
                    self.memory[key] = value
                return value
        return None

    def put(self, key, value) -> None:
        with self.lock:
            self.memory[key] = value
        if self.dir:
            path = self.dir / f"{key}.npz"
            fd, tmp = tempfile.mkstemp(dir=self.dir, suffix=".npz")
            os.close(fd)
            np.savez(tmp, **self._pack(value))
            os.replace(tmp, path)

    @staticmethod
    def _pack(value) -> dict:
        if isinstance(value, str):
            return {"kind": np.array("str"), "text": np.array(value)}
        if isinstance(value, np.ndarray):
            return {"kind": np.array("array"), "a0": value}
        if all(isinstance(v, str) for v in value):
            return {"kind": np.array("strs"), "text": np.array(json.dumps(list(value)))}
        return {"kind": np.array("arrays"), **{f"a{i}": v for i, v in enumerate(value)}}

    @staticmethod
    def _unpack(z):
        kind = str(z["kind"])
        if kind == "str":
            return str(z["text"])
        if kind == "strs":
            return json.loads(str(z["text"]))
        if kind == "array":
            return z["a0"]
        n = len([k for k in z.files if k.startswith("a")])
        return [z[f"a{i}"] for i in range(n)]


class CachedExtractor:
    def __init__(self, inner: ObjectExtractor, cache_dir=None):
        self.inner, self.cache = inner, _Cache(cache_dir)

    def extract(self, caption):
        key = digest("extract", caption)
        hit = self.cache.get(key)
        if hit is None:
            hit = self.inner.extract(caption)
            self.cache.put(key, hit)
        return hit


class CachedSegmenter:
    def __init__(self, inner: GroundedSegmenter, cache_dir=None):
        self.inner, self.cache = inner, _Cache(cache_dir)

    def segment(self, video, phrases, video_ref=None):
        key = digest("segment", np.asarray(video, np.float32), list(phrases))
        hit = self.cache.get(key)
        if hit is None:
            hit = [np.asarray(m, dtype=bool) for m in self.inner.segment(video, phrases, video_ref=video_ref)]
            self.cache.put(key, hit)
        return [np.asarray(m, dtype=bool) for m in hit]


class CachedFlow:
    def __init__(self, inner: FlowEstimator, cache_dir=None):
        self.inner, self.cache = inner, _Cache(cache_dir)

    def flow(self, frame_a, frame_b):
        key = digest("flow", np.asarray(frame_a, np.float32), np.asarray(frame_b, np.float32))
        hit = self.cache.get(key)
        if hit is None:
            hit = np.asarray(self.inner.flow(frame_a, frame_b), dtype=np.float32)
            self.cache.put(key, hit)
        return hit


def cached(clients: ExternalClients, cache_dir=None) -> ExternalClients:
    cache_dir = cache_dir or os.environ.get("MM_CACHE_DIR")
    return ExternalClients(CachedExtractor(clients.object_extractor, cache_dir),
                           CachedSegmenter(clients.grounded_segmenter, cache_dir),
                           CachedFlow(clients.flow_estimator, cache_dir))


# -- HTTP-JSON bindings -------------------------------------------------------


def _post(url: str, payload: dict, timeout: float) -> dict:
    req = urllib.request.Request(url, data=json.dumps(payload).encode(),
                                 headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read())
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise ClientError(f"request to {url} failed: {exc}") from exc


class HttpObjectExtractor:
    """``{"caption": ...}`` -> ``{"objects": [...]}`` (or ``"empty"``)."""

    def __init__(self, url: str, timeout: float = 60.0):
        self.url, self.timeout = url, timeout

    def extract(self, caption):
        resp = _post(self.url, {"caption": caption}, self.timeout)
        if "objects" not in resp:
            raise ClientError(f"malformed extractor response: {resp}")
        return resp["objects"]


class HttpSegmenter:
    """``{"video_ref": ..., "phrases": [...]}`` -> ``{"tracks": trajectory-JSON}``.

    Track ``i`` of the returned document is the mask stack of phrase ``i``.
    """

    def __init__(self, url: str, timeout: float = 600.0):
        self.url, self.timeout = url, timeout

    def segment(self, video, phrases, video_ref=None):
        if video_ref is None:
            raise ClientError("HTTP segmenter needs a video_ref the server can resolve")
        resp = _post(self.url, {"video_ref": str(video_ref), "phrases": list(phrases)}, self.timeout)
        try:
            ts = trajectory_from_json(resp["tracks"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ClientError(f"malformed segmenter response: {exc}") from exc
        masks = ts.mask_tracks()
        return [masks[k] for k in sorted(masks)]


class HttpFlowEstimator:
    """Frames are exchanged as raw tensor files: ``{"frame_a_file", "frame_b_file"}`` -> ``{"flow_file"}``."""

    def __init__(self, url: str, workdir=None, timeout: float = 120.0):
        self.url, self.timeout = url, timeout
        self.workdir = Path(workdir or tempfile.mkdtemp(prefix="trajvid-flow-"))
        self.workdir.mkdir(parents=True, exist_ok=True)

    def flow(self, frame_a, frame_b):
        key = digest(np.asarray(frame_a, np.float32), np.asarray(frame_b, np.float32))[:16]
        fa, fb = self.workdir / f"{key}_a.mmt", self.workdir / f"{key}_b.mmt"
        tensorio.write_tensor(fa, frame_a)
        tensorio.write_tensor(fb, frame_b)
        resp = _post(self.url, {"frame_a_file": str(fa), "frame_b_file": str(fb)}, self.timeout)
        try:
            out = tensorio.read_tensor(resp["flow_file"])
        except (KeyError, OSError, ValueError) as exc:
            raise ClientError(f"malformed flow response: {exc}") from exc
        if out.ndim != 3 or out.shape[-1] != 2:
            raise ClientError(f"flow field must be (H, W, 2), got {out.shape}")
        return out


def clients_from_env(env: Mapping[str, str] | None = None) -> ExternalClients:
    """HTTP clients from ``MM_CLIENT_ENDPOINT_{EXTRACTOR,SEGMENTER,FLOW}``."""
    env = os.environ if env is None else env
    try:
        return ExternalClients(HttpObjectExtractor(env["MM_CLIENT_ENDPOINT_EXTRACTOR"]),
                               HttpSegmenter(env["MM_CLIENT_ENDPOINT_SEGMENTER"]),
                               HttpFlowEstimator(env["MM_CLIENT_ENDPOINT_FLOW"]))
    except KeyError as exc:
        raise ClientError(f"missing endpoint variable {exc.args[0]}") from exc
