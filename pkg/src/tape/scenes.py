"""Procedural clean clips for desk-scale experiments and tests."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .media_io import FrameSeq


def make_scene_clip(seed: int, n_frames: int, h: int, w: int,
                    velocity: tuple[float, float] | None = None) -> FrameSeq:
    """Smooth colored texture with a few hard-edged shapes, panned over time.

    The camera moves by ``velocity`` (dy, dx) pixels per frame, rounded to the
    integer grid, so consecutive frames are exact translations of one canvas.
    """
    rng = np.random.default_rng(seed)
    if velocity is None:
        velocity = (float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-1.0, 1.0)))
    pad = int(np.ceil(max(abs(velocity[0]), abs(velocity[1])) * n_frames)) + 2
    H, W = h + 2 * pad, w + 2 * pad

    canvas = np.zeros((H, W, 3))
    for sigma, amp in ((12.0, 1.0), (4.0, 0.5), (1.5, 0.2)):
        field = gaussian_filter(rng.standard_normal((H, W, 3)), sigma=(sigma, sigma, 0))
        field /= field.std() + 1e-12
        canvas += amp * field
    canvas = 0.5 + 0.15 * canvas
    for _ in range(int(rng.integers(3, 7))):
        y0, x0 = int(rng.integers(0, H - 4)), int(rng.integers(0, W - 4))
        hh, ww = int(rng.integers(4, max(5, h // 3))), int(rng.integers(4, max(5, w // 3)))
        canvas[y0:y0 + hh, x0:x0 + ww] = rng.uniform(0.05, 0.95, size=3)
    canvas = np.clip(canvas, 0.0, 1.0)

    frames = []
    for t in range(n_frames):
        dy = int(round(velocity[0] * t))
        dx = int(round(velocity[1] * t))
        y, x = pad + dy, pad + dx
        frames.append(canvas[y:y + h, x:x + w])
    return FrameSeq(np.stack(frames).astype(np.float32))
