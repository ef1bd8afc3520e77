"""Seeded analog-tape degradation.

Every random draw comes from a Philox counter-based generator keyed by
``(seed, frame_index, stream_id)``, so per-frame parameters do not depend on
iteration order and a recipe can be regenerated from ``(seed, config, n_frames,
frame_height)`` alone.

Per-frame effect order is fixed: undersaturation, tape noise, dropout overlay,
horizontal displacement, chroma scanlines.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .media_io import FrameSeq, check_frame

RECIPE_VERSION = 1

# rng stream ids
CLEAN_STREAM = 0
ENABLE_STREAM = 1
SATURATION_STREAM = 2
NOISE_STREAM = 3
DROPOUT_STREAM = 4
GRID_STREAM = 5
CHROMA_STREAM = 6
NOISE_FIELD_STREAM = 16
OVERLAY_BANK_SEED = 0x7A9E

EFFECTS = ("undersaturation", "noise", "dropout", "displacement", "chroma")

CHROMA_COLORS = {
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "green": (0.0, 1.0, 0.0),
}

# (active rows, inactive rows) per grid; thin scanline jitter up to thick mistracking bands
GRID_TEMPLATES = (
    (1, 7),
    (2, 14),
    (4, 12),
    (8, 24),
    (16, 48),
    (24, 40),
)

LUMA = np.array([0.299, 0.587, 0.114])


def counter_rng(seed: int, frame_index: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(frame_index), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


def _check_range(name, rng):
    lo, hi = rng
    if lo > hi:
        raise ValueError(f"empty range for {name}: {rng}")


@dataclass
class DegradationConfig:
    """Sampling ranges for all randomized effect parameters.

    Defaults are desk-scale choices, not values taken from any reference data.
    """

    clean_prob: float = 0.3
    undersaturation_prob: float = 0.5
    saturation_range: tuple[float, float] = (0.1, 0.7)
    noise_prob: float = 0.5
    noise_sigma_range: tuple[float, float] = (0.02, 0.08)
    dropout_prob: float = 0.3
    n_overlays: int = 6
    displacement_prob: float = 0.5
    shift_range: tuple[int, int] = (2, 10)
    wiggle_range: tuple[int, int] = (0, 63)
    chroma_prob: float = 0.5
    chroma_lines_range: tuple[int, int] = (1, 8)
    chroma_alpha_range: tuple[float, float] = (0.3, 0.9)

    def __post_init__(self):
        for name in ("saturation_range", "noise_sigma_range", "shift_range", "wiggle_range",
                     "chroma_lines_range", "chroma_alpha_range"):
            setattr(self, name, tuple(getattr(self, name)))
            _check_range(name, getattr(self, name))
        for name in ("clean_prob", "undersaturation_prob", "noise_prob", "dropout_prob",
                     "displacement_prob", "chroma_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.saturation_range
        if lo < 0 or hi > 1:
            raise ValueError("saturation_range must lie in [0, 1]")
        if self.noise_sigma_range[0] < 0:
            raise ValueError("noise sigma must be >= 0")
        lo, hi = self.chroma_alpha_range
        if lo < 0 or hi > 1:
            raise ValueError("chroma_alpha_range must lie in [0, 1]")
        if self.shift_range[0] < 0 or self.chroma_lines_range[0] < 0 or self.wiggle_range[0] < 0:
            raise ValueError("integer ranges must be non-negative")
        if self.n_overlays < 1:
            raise ValueError("n_overlays must be >= 1")

    @property
    def effect_probs(self) -> tuple[float, ...]:
        return (self.undersaturation_prob, self.noise_prob, self.dropout_prob,
                self.displacement_prob, self.chroma_prob)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationConfig":
        return cls(**d)


@dataclass
class GridSpec:
    grid_id: int
    vertical_offset: int
    band_rows: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def is_identity(self) -> bool:
        return all(shift == 0 for _, _, shift in self.band_rows)


@dataclass
class EffectParams:
    saturation_scale: float = 1.0
    noise_sigma: float = 0.0
    dropout_overlay_id: int | None = None
    chroma_lines: list[tuple[int, str, float]] = field(default_factory=list)
    displacement_grid: GridSpec | None = None

    @property
    def enabled(self) -> dict[str, bool]:
        return {
            "undersaturation": self.saturation_scale != 1.0,
            "noise": self.noise_sigma > 0.0,
            "dropout": self.dropout_overlay_id is not None,
            "displacement": self.displacement_grid is not None and not self.displacement_grid.is_identity,
            "chroma": any(alpha > 0.0 for _, _, alpha in self.chroma_lines),
        }

    @property
    def is_identity(self) -> bool:
        return not any(self.enabled.values())

    @classmethod
    def from_dict(cls, d: dict) -> "EffectParams":
        grid = d.get("displacement_grid")
        if grid is not None:
            grid = GridSpec(grid["grid_id"], grid["vertical_offset"],
                            [tuple(b) for b in grid["band_rows"]])
        return cls(
            saturation_scale=d["saturation_scale"],
            noise_sigma=d["noise_sigma"],
            dropout_overlay_id=d["dropout_overlay_id"],
            chroma_lines=[(int(r), str(c), float(a)) for r, c, a in d["chroma_lines"]],
            displacement_grid=grid,
        )


@dataclass
class DegradationRecipe:
    seed: int
    config: DegradationConfig
    frame_height: int
    per_frame: list[EffectParams]

    def __len__(self):
        return len(self.per_frame)

    def to_dict(self) -> dict:
        return {
            "version": RECIPE_VERSION,
            "seed": self.seed,
            "frame_height": self.frame_height,
            "config": asdict(self.config),
            "per_frame": [asdict(p) for p in self.per_frame],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationRecipe":
        if d.get("version") != RECIPE_VERSION:
            raise ValueError(f"unsupported recipe version {d.get('version')!r}")
        return cls(
            seed=int(d["seed"]),
            config=DegradationConfig.from_dict(d["config"]),
            frame_height=int(d["frame_height"]),
            per_frame=[EffectParams.from_dict(p) for p in d["per_frame"]],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DegradationRecipe":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# recipe sampling


def build_grid(config: DegradationConfig, grid_id: int, frame_h: int,
               rng: np.random.Generator, offset: int | None = None) -> GridSpec:
    """Place template ``grid_id`` at a wiggled vertical offset and draw band shifts.

    Row ``y`` is active when ``(y - offset) mod period < active``; bands are
    clipped to ``[0, frame_h)``. Pass ``offset`` to pin the wiggle state.
    """
    if not 0 <= grid_id < len(GRID_TEMPLATES):
        raise ValueError(f"grid_id must be in [0, {len(GRID_TEMPLATES)}), got {grid_id}")
    active, inactive = GRID_TEMPLATES[grid_id]
    period = active + inactive
    if offset is None:
        offset = int(rng.integers(config.wiggle_range[0], config.wiggle_range[1] + 1))
    lo, hi = config.shift_range
    bands = []
    # first band start at or above row 0
    start = offset % period - period
    while start < frame_h:
        r0, r1 = max(start, 0), min(start + active, frame_h)
        if r0 < r1:
            mag = int(rng.integers(lo, hi + 1))
            sign = 1 if rng.random() < 0.5 else -1
            bands.append((r0, r1, sign * mag))
        start += period
    return GridSpec(grid_id, int(offset), bands)


def _sample_frame(seed: int, t: int, config: DegradationConfig, frame_h: int) -> EffectParams:
    if counter_rng(seed, t, CLEAN_STREAM).random() < config.clean_prob:
        return EffectParams()
    probs = np.array(config.effect_probs)
    if probs.sum() == 0:
        return EffectParams()
    rng = counter_rng(seed, t, ENABLE_STREAM)
    on = rng.random(len(EFFECTS)) < probs
    if not on.any():
        # a non-clean frame always carries at least one effect
        on[rng.choice(len(EFFECTS), p=probs / probs.sum())] = True
    params = EffectParams()
    if on[0]:
        r = counter_rng(seed, t, SATURATION_STREAM)
        params.saturation_scale = float(r.uniform(*config.saturation_range))
    if on[1]:
        r = counter_rng(seed, t, NOISE_STREAM)
        params.noise_sigma = float(r.uniform(*config.noise_sigma_range))
    if on[2]:
        r = counter_rng(seed, t, DROPOUT_STREAM)
        params.dropout_overlay_id = int(r.integers(0, config.n_overlays))
    if on[3]:
        r = counter_rng(seed, t, GRID_STREAM)
        grid_id = int(r.integers(0, len(GRID_TEMPLATES)))
        params.displacement_grid = build_grid(config, grid_id, frame_h, r)
    if on[4]:
        r = counter_rng(seed, t, CHROMA_STREAM)
        n = int(r.integers(config.chroma_lines_range[0], config.chroma_lines_range[1] + 1))
        colors = list(CHROMA_COLORS)
        rows = r.choice(frame_h, size=min(n, frame_h), replace=False)
        params.chroma_lines = [
            (int(row), colors[int(r.integers(0, 3))], float(r.uniform(*config.chroma_alpha_range)))
            for row in sorted(rows)
        ]
    return params


def make_recipe(seed: int, config: DegradationConfig, n_frames: int, frame_h: int) -> DegradationRecipe:
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    if frame_h <= 0:
        raise ValueError("frame_h must be positive")
    per_frame = [_sample_frame(seed, t, config, frame_h) for t in range(n_frames)]
    return DegradationRecipe(int(seed), config, int(frame_h), per_frame)


# ---------------------------------------------------------------------------
# effects


def apply_undersaturation(frame: np.ndarray, scale: float) -> np.ndarray:
    if not 0.0 <= scale <= 1.0:
        raise ValueError(f"saturation scale must be in [0, 1], got {scale}")
    if scale == 1.0:
        return frame
    f = frame.astype(np.float64)
    gray = (f @ LUMA)[..., None]
    return np.clip(gray + scale * (f - gray), 0.0, 1.0).astype(np.float32)


def apply_tape_noise(frame: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return frame
    noise = rng.standard_normal(frame.shape) * sigma
    return np.clip(frame.astype(np.float64) + noise, 0.0, 1.0).astype(np.float32)


def apply_dropout_overlay(frame: np.ndarray, overlay: np.ndarray) -> np.ndarray:
    """Lighten-mode blend."""
    if frame.shape != overlay.shape:
        raise ValueError(f"overlay shape {overlay.shape} != frame shape {frame.shape}")
    return np.maximum(frame, overlay.astype(frame.dtype))


def dropout_overlay(overlay_id: int, h: int, w: int) -> np.ndarray:
    """Procedural white-streak texture from the built-in bank."""
    rng = counter_rng(OVERLAY_BANK_SEED, overlay_id, 0)
    out = np.zeros((h, w), dtype=np.float64)
    n_streaks = int(rng.integers(3, 13))
    for _ in range(n_streaks):
        row = int(rng.integers(0, h))
        thick = int(rng.integers(1, 3))
        length = int(rng.integers(max(2, w // 16), max(3, w // 3)))
        x0 = int(rng.integers(-length // 2, w))
        peak = rng.uniform(0.7, 1.0)
        xs = np.arange(length)
        # taper both ends of the streak
        profile = peak * np.sin(np.pi * (xs + 0.5) / length) ** 0.5
        cols = x0 + xs
        keep = (cols >= 0) & (cols < w)
        for r in range(row, min(row + thick, h)):
            out[r, cols[keep]] = np.maximum(out[r, cols[keep]], profile[keep])
    return np.repeat(out[..., None], 3, axis=2).astype(np.float32)


def apply_displacement(frame: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Shift active bands horizontally (positive = right) with edge replication."""
    h, w = frame.shape[:2]
    if grid.is_identity:
        return frame
    out = frame.copy()
    cols = np.arange(w)
    for r0, r1, shift in grid.band_rows:
        if not (0 <= r0 < r1 <= h):
            raise ValueError(f"band [{r0}, {r1}) outside frame height {h}")
        if shift == 0:
            continue
        src = np.clip(cols - shift, 0, w - 1)
        out[r0:r1] = frame[r0:r1][:, src]
    return out


def apply_chroma_lines(frame: np.ndarray, lines) -> np.ndarray:
    if not lines:
        return frame
    h = frame.shape[0]
    out = frame.astype(np.float64)
    for row, color, alpha in lines:
        if color not in CHROMA_COLORS:
            raise ValueError(f"invalid chroma color {color!r}")
        if not 0 <= row < h:
            raise ValueError(f"chroma row {row} outside frame height {h}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"chroma alpha must be in [0, 1], got {alpha}")
        if alpha == 0:
            continue
        out[row] = (1.0 - alpha) * out[row] + alpha * np.asarray(CHROMA_COLORS[color])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def degrade_frame(frame: np.ndarray, params: EffectParams, seed: int, t: int) -> np.ndarray:
    out = frame
    if params.saturation_scale != 1.0:
        out = apply_undersaturation(out, params.saturation_scale)
    if params.noise_sigma > 0:
        out = apply_tape_noise(out, params.noise_sigma, counter_rng(seed, t, NOISE_FIELD_STREAM))
    if params.dropout_overlay_id is not None:
        h, w = out.shape[:2]
        out = apply_dropout_overlay(out, dropout_overlay(params.dropout_overlay_id, h, w))
    if params.displacement_grid is not None:
        out = apply_displacement(out, params.displacement_grid)
    if params.chroma_lines:
        out = apply_chroma_lines(out, params.chroma_lines)
    return out


def degrade_clip(clip: FrameSeq, recipe: DegradationRecipe) -> FrameSeq:
    if len(recipe) != len(clip):
        raise ValueError(f"recipe covers {len(recipe)} frames, clip has {len(clip)}")
    if recipe.frame_height != clip.height:
        raise ValueError(f"recipe built for height {recipe.frame_height}, clip height {clip.height}")
    out = [degrade_frame(check_frame(f), p, recipe.seed, t)
           for t, (f, p) in enumerate(zip(clip.frames, recipe.per_frame))]
    return FrameSeq(np.stack(out), fps=clip.fps)
