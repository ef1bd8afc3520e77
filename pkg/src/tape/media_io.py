"""Frame sequences on disk and in memory.

Frames are ``(H, W, 3)`` float32 arrays in ``[0, 1]`` (RGB). A clip on disk is a
directory of 8-bit PNGs named by zero-padded frame index::

    <clip>/degraded/000000.png
    <clip>/gt/000000.png        (absent for real-world clips)
    <clip>/recipe.json          (optional, synthetic clips only)
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

INDEX_DIGITS = 6
_NAME_RE = re.compile(r"^(\d+)\.png$", re.IGNORECASE)


class FrameError(ValueError):
    """Invalid frame data or frame-directory layout."""


def check_frame(pixels: np.ndarray) -> np.ndarray:
    """Validate a frame array and return it as float32."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FrameError(f"frame must be HxWx3, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise FrameError(f"frame has empty spatial dims {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)):
        raise FrameError("frame contains NaN or Inf")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise FrameError(f"frame values outside [0, 1]: [{arr.min()}, {arr.max()}]")
    return arr.astype(np.float32, copy=False)


@dataclass
class FrameSeq:
    """Ordered frames of one clip, stacked as ``(N, H, W, 3)``."""

    frames: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        arr = np.asarray(self.frames)
        if arr.ndim != 4 or arr.shape[0] == 0 or arr.shape[3] != 3:
            raise FrameError(f"FrameSeq needs shape (N, H, W, 3) with N >= 1, got {arr.shape}")
        check_frame(arr.reshape(-1, arr.shape[2], 3))
        if self.fps <= 0:
            raise FrameError("fps must be positive")
        self.frames = arr.astype(np.float32, copy=False)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @classmethod
    def from_list(cls, frames, fps: float = 25.0) -> "FrameSeq":
        frames = [check_frame(f) for f in frames]
        if not frames:
            raise FrameError("FrameSeq needs at least one frame")
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise FrameError(f"inconsistent frame dimensions: {sorted(shapes)}")
        return cls(np.stack(frames), fps=fps)


@dataclass
class PairedClip:
    degraded: FrameSeq
    ground_truth: FrameSeq | None = None
    recipe_path: Path | None = None

    def __post_init__(self):
        gt = self.ground_truth
        if gt is not None and gt.frames.shape != self.degraded.frames.shape:
            raise FrameError(
                f"ground truth shape {gt.frames.shape} != degraded shape {self.degraded.frames.shape}"
            )


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Float ``[0, 1]`` -> uint8 with clamping and round-half-up."""
    v = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def dequantize(data: np.ndarray) -> np.ndarray:
    return np.asarray(data, dtype=np.float32) / np.float32(255.0)


def frame_name(index: int) -> str:
    return f"{index:0{INDEX_DIGITS}d}.png"


def _indexed_files(path: Path) -> dict[int, Path]:
    files = {}
    for p in path.iterdir():
        m = _NAME_RE.match(p.name)
        if m and p.is_file():
            files[int(m.group(1))] = p
    return files


def load_frame_dir(path, fps: float = 25.0) -> FrameSeq:
    path = Path(path)
    if not path.is_dir():
        raise FrameError(f"frame directory not found: {path}")
    files = _indexed_files(path)
    if not files:
        raise FrameError(f"no indexed PNG frames in {path}")
    indices = sorted(files)
    gaps = sorted(set(range(indices[-1] + 1)) - set(indices))
    if gaps:
        raise FrameError(f"non-contiguous frame indices in {path}; missing {gaps}")
    frames = []
    for i in indices:
        with Image.open(files[i]) as im:
            data = np.asarray(im.convert("RGB"))
        if frames and data.shape != frames[0].shape:
            raise FrameError(
                f"inconsistent dimensions in {path}: frame {i} is {data.shape[:2]}, "
                f"frame 0 is {frames[0].shape[:2]}"
            )
        frames.append(data)
    return FrameSeq(dequantize(np.stack(frames)), fps=fps)


def save_frame_dir(seq: FrameSeq, path) -> None:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FrameError(f"cannot create {path}: {exc}") from exc
    data = quantize(seq.frames)
    for i, frame in enumerate(data):
        Image.fromarray(frame).save(path / frame_name(i))


def save_image(pixels: np.ndarray, path) -> None:
    """Write a single float image (gray ``HxW`` or RGB ``HxWx3``) as 8-bit PNG."""
    data = quantize(pixels)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path)


def center_crop(frame: np.ndarray, h: int, w: int) -> np.ndarray:
    """Crop anchored at ``(floor((H-h)/2), floor((W-w)/2))``.

    Works on any array whose two leading axes are (H, W); use
    :func:`center_crop_seq` for stacked frames.
    """
    H, W = frame.shape[:2]
    if h > H or w > W or h < 1 or w < 1:
        raise FrameError(f"cannot crop {h}x{w} from {H}x{W}")
    top, left = (H - h) // 2, (W - w) // 2
    return frame[top:top + h, left:left + w]


def center_crop_seq(seq: FrameSeq, h: int, w: int) -> FrameSeq:
    H, W = seq.height, seq.width
    if h > H or w > W:
        raise FrameError(f"cannot crop {h}x{w} from {H}x{W}")
    top, left = (H - h) // 2, (W - w) // 2
    return FrameSeq(seq.frames[:, top:top + h, left:left + w].copy(), fps=seq.fps)


def load_paired_clip(path) -> PairedClip:
    path = Path(path)
    degraded = load_frame_dir(path / "degraded")
    gt_dir = path / "gt"
    gt = load_frame_dir(gt_dir) if gt_dir.is_dir() else None
    recipe = path / "recipe.json"
    return PairedClip(degraded, gt, recipe if recipe.is_file() else None)


def save_paired_clip(clip: PairedClip, path) -> None:
    path = Path(path)
    save_frame_dir(clip.degraded, path / "degraded")
    if clip.ground_truth is not None:
        save_frame_dir(clip.ground_truth, path / "gt")


def resolve_clip_frames(path) -> Path:
    """Accept either a bare frame directory or a clip root with ``degraded/``."""
    path = Path(path)
    if (path / "degraded").is_dir():
        return path / "degraded"
    return path
