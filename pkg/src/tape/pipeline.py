"""Glue between the stages: synthesize datasets, classify clips, restore whole clips."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from .degradation import DegradationConfig, degrade_clip, make_recipe
from .frame_analysis import CleanSet, EmbeddingProvider, analyze_clip
from .media_io import FrameSeq, PairedClip, load_frame_dir, save_frame_dir
from .net.model import TapeNet
from .training import TrainingClip, window_references

log = logging.getLogger(__name__)


def clip_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def synthesize_clip(clean: FrameSeq, seed: int, config: DegradationConfig) -> tuple[PairedClip, object]:
    recipe = make_recipe(seed, config, len(clean), clean.height)
    return PairedClip(degrade_clip(clean, recipe), clean), recipe


def synthesize_dataset(sources: dict[str, FrameSeq], out_root, seed: int, config: DegradationConfig,
                       dry_run: bool = False) -> list[Path]:
    """Write ``<out>/<name>/{gt,degraded}/`` and ``recipe.json`` per source clip."""
    out_root = Path(out_root)
    written = []
    for i, name in enumerate(sorted(sources)):
        clean = sources[name]
        recipe = make_recipe(clip_seed(seed, i), config, len(clean), clean.height)
        clip_dir = out_root / name
        clip_dir.mkdir(parents=True, exist_ok=True)
        recipe.save(clip_dir / "recipe.json")
        if not dry_run:
            save_frame_dir(clean, clip_dir / "gt")
            save_frame_dir(degrade_clip(clean, recipe), clip_dir / "degraded")
        written.append(clip_dir)
    return written


def window_starts(n: int, T: int) -> list[int]:
    """Non-overlapping windows of stride ``T``; a final window is right-aligned
    to cover the tail."""
    if n < T:
        return [0]
    starts = list(range(0, n - T + 1, T))
    if starts[-1] + T < n:
        starts.append(n - T)
    return starts


def restore_clip(model: TapeNet, frames: np.ndarray, clean: CleanSet, batch_windows: int = 1) -> np.ndarray:
    """Restore a whole clip window by window. Output is clamped to ``[0, 1]``.

    Frames already produced by an earlier window keep that result when the
    right-aligned tail window overlaps them.
    """
    cfg = model.cfg
    n = len(frames)
    T, D = cfg.T, cfg.D
    if n < T:
        log.warning("clip has %d frames < T=%d; padding by repeating the last frame", n, T)
        pad = np.repeat(frames[-1:], T - n, axis=0)
        frames_p = np.concatenate([frames, pad])
        emb = np.concatenate([clean.image_embeddings, np.repeat(clean.image_embeddings[-1:], T - n, axis=0)])
        clean = CleanSet(clean.scores, clean.threshold, clean.clean_indices, emb, clean.prompts, clean.fallback)
    else:
        frames_p = frames
    out = np.empty_like(frames_p)
    done = np.zeros(len(frames_p), dtype=bool)
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        for start in window_starts(n, T):
            center = min(start + T // 2, n - 1)
            refs = window_references(clean, center, D, range(start, start + T))
            x = torch.as_tensor(frames_p[start:start + T], dtype=dtype)[None]
            r = torch.as_tensor(frames_p[refs], dtype=dtype)[None]
            y = model(x, r)[0].cpu().numpy()
            for k in range(T):
                if not done[start + k]:
                    out[start + k] = y[k]
                    done[start + k] = True
    return np.clip(out[:n], 0.0, 1.0).astype(np.float32)


def load_training_clips(root, provider: EmbeddingProvider, prompts=None, D: int = 5,
                        use_classification: bool = True) -> list[TrainingClip]:
    """Every ``<root>/<clip>`` with ``degraded/`` and ``gt/`` becomes a training clip."""
    clips = []
    for clip_dir in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        if not (clip_dir / "degraded").is_dir() or not (clip_dir / "gt").is_dir():
            continue
        deg = load_frame_dir(clip_dir / "degraded")
        gt = load_frame_dir(clip_dir / "gt")
        clean = analyze_clip(provider, deg, prompts, min_refs=D, use_classification=use_classification)
        clips.append(TrainingClip(deg.frames, gt.frames, clean, clip_dir.name))
    if not clips:
        raise ValueError(f"no paired clips under {root}")
    return clips
