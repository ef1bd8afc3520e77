"""Desk-scale end-to-end experiment and ablation harness."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .degradation import DegradationConfig
from .evaluation import clip_psnr
from .frame_analysis import DeterministicToyProvider, analyze_clip
from .net.model import NetConfig, build_model
from .pipeline import clip_seed, restore_clip, synthesize_clip
from .scenes import make_scene_clip
from .training import LossConfig, ToyPerceptualProvider, TrainConfig, TrainingClip, make_optimizer, train

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    n_clips: int = 8
    n_frames: int = 20
    size: int = 64
    held_out: int = 1
    seed: int = 0
    net: NetConfig = field(default_factory=lambda: NetConfig(C=32))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=400, lr=1e-3, crop=64))
    loss: LossConfig = field(default_factory=LossConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    use_classification: bool = True


@dataclass
class DeskResult:
    degraded_psnr: float
    restored_psnr: float
    losses: list[float]
    block_means: list[float]
    seconds: float
    clean_counts: list[int]

    @property
    def gain_db(self) -> float:
        return self.restored_psnr - self.degraded_psnr

    @property
    def monotone(self) -> bool:
        return all(b <= a for a, b in zip(self.block_means, self.block_means[1:]))


def block_means(values, width: int = 100) -> list[float]:
    """Moving average sampled every ``width`` steps (non-overlapping windows)."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // width
    return [float(v[i * width:(i + 1) * width].mean()) for i in range(n)]


def make_desk_clips(cfg: DeskConfig, provider=None):
    provider = provider or DeterministicToyProvider()
    clips = []
    for i in range(cfg.n_clips):
        clean = make_scene_clip(clip_seed(cfg.seed, 1000 + i), cfg.n_frames, cfg.size, cfg.size)
        paired, _ = synthesize_clip(clean, clip_seed(cfg.seed, i), cfg.degradation)
        cs = analyze_clip(provider, paired.degraded, min_refs=cfg.net.D,
                          use_classification=cfg.use_classification)
        clips.append(TrainingClip(paired.degraded.frames, paired.ground_truth.frames, cs, f"clip{i:02d}"))
    return clips


def run_desk_experiment(cfg: DeskConfig, clips=None, log_path=None) -> DeskResult:
    t0 = time.time()
    clips = clips if clips is not None else make_desk_clips(cfg)
    train_clips, test_clips = clips[:-cfg.held_out], clips[-cfg.held_out:]
    model = build_model(cfg.net, seed=cfg.seed)
    provider = ToyPerceptualProvider(seed=cfg.seed)
    optimizer = make_optimizer(model, cfg.train)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        records = train(model, train_clips, cfg.train, cfg.loss, provider,
                        optimizer=optimizer, log_path=log_path)
    losses = [r["loss_total"] for r in records]
    deg, res = [], []
    for clip in test_clips:
        restored = restore_clip(model, clip.degraded, clip.clean)
        deg.append(clip_psnr(clip.degraded, clip.gt))
        res.append(clip_psnr(restored, clip.gt))
    return DeskResult(float(np.mean(deg)), float(np.mean(res)), losses, block_means(losses),
                      time.time() - t0, [c.clean.n_clean for c in clips])


ABLATIONS = {
    "full": {},
    "swin3d_cross": {"fusion_mode": "swin3d_cross"},
    "average_pooling": {"pooling_mode": "average"},
    "D1": {"D": 1},
    "D3": {"D": 3},
    "D5": {"D": 5},
}


def run_ablation(cfg: DeskConfig, name: str, steps: int, clips=None, use_classification: bool | None = None):
    """Train a variant briefly and restore the held-out clip.

    Clips are re-analyzed when the variant needs a different number of
    references or a different classification setting.
    """
    net = replace(cfg.net, **ABLATIONS[name])
    sub = replace(cfg, net=net, train=replace(cfg.train, steps=steps),
                  use_classification=cfg.use_classification if use_classification is None else use_classification)
    if clips is None or net.D != cfg.net.D or sub.use_classification != cfg.use_classification:
        clips = make_desk_clips(sub)
    return run_desk_experiment(sub, clips)
