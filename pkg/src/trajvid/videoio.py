"""Clip storage: a directory of ``frame_00000.png`` files or a single raw tensor file."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import tensorio


def save_frames(clip, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    clip = np.asarray(clip, dtype=np.float32)
    for i, frame in enumerate(clip):
        img = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(directory / f"frame_{i:05d}.png")
    return directory


def load_frames(directory) -> np.ndarray:
    files = sorted(Path(directory).glob("frame_*.png"))
    if not files:
        raise FileNotFoundError(f"no frame_*.png files in {directory}")
    return np.stack([np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0 for f in files])


def save_video(clip, path) -> Path:
    """Write a clip; ``.mmt`` paths get a raw tensor, anything else a PNG frame directory."""
    path = Path(path)
    if path.suffix == ".mmt":
        path.parent.mkdir(parents=True, exist_ok=True)
        tensorio.write_tensor(path, clip)
        return path
    return save_frames(clip, path)


def load_video(path) -> np.ndarray:
    path = Path(path)
    if path.is_dir():
        return load_frames(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    return tensorio.read_tensor(path)
