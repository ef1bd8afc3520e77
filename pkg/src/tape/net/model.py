"""Swin-UNet restoration network with reference fusion in the decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .attention import MRSFFPair, Swin3DBlock, Swin3DCrossPair
from .windows import pad_to_multiple


@dataclass
class NetConfig:
    T: int = 5
    D: int = 5
    M: int = 8
    C: int = 96
    stages: int = 3
    depth: int = 2
    bottleneck_depth: int = 2
    extractor_depth: int = 2
    heads_per_stage: list[int] | None = None
    mlp_ratio: float = 4.0
    fusion_mode: str = "mrsff"
    pooling_mode: str = "attention"

    def __post_init__(self):
        if self.M < 1 or self.T < 1 or self.D < 1 or self.C < 1 or self.stages < 1:
            raise ValueError("T, D, M, C and stages must be positive")
        if self.fusion_mode not in ("mrsff", "swin3d_cross"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.pooling_mode not in ("attention", "average"):
            raise ValueError(f"unknown pooling_mode {self.pooling_mode!r}")
        if self.heads_per_stage is not None:
            self.heads_per_stage = list(self.heads_per_stage)
            if len(self.heads_per_stage) != self.stages + 1:
                raise ValueError("heads_per_stage needs one entry per level incl. bottleneck")
        for s in range(self.stages + 1):
            if self.channels(s) % self.heads(s):
                raise ValueError(f"level {s}: {self.channels(s)} channels not divisible by {self.heads(s)} heads")

    def channels(self, s: int) -> int:
        return self.C * 2 ** s

    def heads(self, s: int) -> int:
        if self.heads_per_stage is not None:
            return self.heads_per_stage[s]
        return max(1, self.channels(s) // 32)

    @property
    def pad_multiple(self) -> int:
        return self.M * 2 ** self.stages

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def _frames_conv(conv: nn.Conv2d, x: torch.Tensor) -> torch.Tensor:
    # (B, F, H, W, Cin) -> (B, F, H, W, Cout)
    B, Fr, H, W, C = x.shape
    y = conv(x.reshape(B * Fr, H, W, C).permute(0, 3, 1, 2))
    return y.permute(0, 2, 3, 1).reshape(B, Fr, H, W, -1)


def pixel_shuffle(x: torch.Tensor, r: int = 2) -> torch.Tensor:
    """Channels-last pixel shuffle: ``(..., H, W, c*r*r)`` -> ``(..., r*H, r*W, c)``.

    Channel ``k*r*r + i*r + j`` lands at sub-position ``(i, j)``.
    """
    *lead, H, W, Cr = x.shape
    if Cr % (r * r):
        raise ValueError(f"{Cr} channels not divisible by {r * r}")
    c = Cr // (r * r)
    x = x.reshape(-1, H, W, c, r, r).permute(0, 1, 4, 2, 5, 3)
    return x.reshape(*lead, H * r, W * r, c)


class PatchMerge(nn.Module):
    """2x2 neighborhoods concatenated row-major (4C) and projected to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        B, Fr, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"patch merge needs even dims, got {H}x{W}")
        x = x.view(B, Fr, H // 2, 2, W // 2, 2, C).permute(0, 1, 2, 4, 3, 5, 6)
        return self.reduction(x.reshape(B, Fr, H // 2, W // 2, 4 * C))


class PatchExpand(nn.Module):
    """Project C -> 2C, then pixel-shuffle to ``(2H, 2W, C/2)``."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError("patch expand needs an even channel count")
        self.expand = nn.Linear(dim, 2 * dim, bias=False)

    def forward(self, x):
        return pixel_shuffle(self.expand(x), 2)


def _stage(cfg: NetConfig, level: int, depth: int, T: int) -> nn.Sequential:
    dim, heads = cfg.channels(level), cfg.heads(level)
    return nn.Sequential(*[
        Swin3DBlock(dim, heads, T, cfg.M, 0 if i % 2 == 0 else cfg.M // 2, cfg.mlp_ratio)
        for i in range(depth)
    ])


class ReferenceExtractor(nn.Module):
    """Frozen per-frame Swin encoder producing one feature map per decoder level."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.shallow = nn.Conv2d(3, cfg.C, 3, padding=1)
        self.stages = nn.ModuleList(_stage(cfg, s, cfg.extractor_depth, 1) for s in range(cfg.stages))
        self.merges = nn.ModuleList(PatchMerge(cfg.channels(s)) for s in range(cfg.stages - 1))
        self.requires_grad_(False)

    def train(self, mode: bool = True):
        return super().train(False)

    @torch.no_grad()
    def forward(self, refs: torch.Tensor) -> list[torch.Tensor]:
        B, D, H, W, _ = refs.shape
        x = _frames_conv(self.shallow, refs).reshape(B * D, 1, H, W, -1)
        feats = []
        for s, stage in enumerate(self.stages):
            x = stage(x)
            feats.append(x.reshape(B, D, *x.shape[2:]))
            if s < len(self.merges):
                x = self.merges[s](x)
        return feats


def _init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class TapeNet(nn.Module):
    """Restore ``T`` degraded frames using ``D`` reference frames.

    Inputs and outputs are channels-last ``(B, T, H, W, 3)``; references are
    ``(B, D, H, W, 3)``. Frames are reflect-padded to a multiple of
    ``M * 2**stages`` and cropped back afterwards.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        C, L = cfg.C, cfg.stages
        self.shallow = nn.Conv2d(3, C, 3, padding=1)
        self.enc = nn.ModuleList(_stage(cfg, s, cfg.depth, cfg.T) for s in range(L))
        self.merges = nn.ModuleList(PatchMerge(cfg.channels(s)) for s in range(L))
        self.bottleneck = _stage(cfg, L, cfg.bottleneck_depth, cfg.T)
        self.expands = nn.ModuleList(PatchExpand(cfg.channels(s + 1)) for s in range(L))
        self.dec = nn.ModuleList(_stage(cfg, s, cfg.depth, cfg.T) for s in range(L))
        if cfg.fusion_mode == "mrsff":
            fusions = (MRSFFPair(cfg.channels(s), cfg.heads(s), cfg.M, cfg.mlp_ratio, cfg.pooling_mode)
                       for s in range(L))
        else:
            fusions = (Swin3DCrossPair(cfg.channels(s), cfg.heads(s), cfg.M, cfg.mlp_ratio) for s in range(L))
        self.fusions = nn.ModuleList(fusions)
        self.out_conv = nn.Conv2d(C, 3, 3, padding=1)
        self.apply(_init_weights)
        self.extractor = ReferenceExtractor(cfg)
        self.extractor.apply(_init_weights)

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("extractor.")]

    def forward(self, x: torch.Tensor, refs: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        B, T, H, W, _ = x.shape
        if T != cfg.T:
            raise ValueError(f"expected {cfg.T} input frames, got {T}")
        if refs.shape[1] != cfg.D:
            raise ValueError(f"expected {cfg.D} reference frames, got {refs.shape[1]}")
        if refs.shape[0] != B or refs.shape[2:] != x.shape[2:]:
            raise ValueError(f"reference shape {tuple(refs.shape)} does not match input {tuple(x.shape)}")
        xp = self._pad(x)
        rp = self._pad(refs)
        pyramid = self.extractor(rp)

        feat = _frames_conv(self.shallow, xp)
        skips = []
        for s in range(cfg.stages):
            feat = self.enc[s](feat)
            skips.append(feat)
            feat = self.merges[s](feat)
        feat = self.bottleneck(feat)
        for s in reversed(range(cfg.stages)):
            feat = self.expands[s](feat) + skips[s]
            feat = self.dec[s](feat)
            feat = self.fusions[s](feat, pyramid[s])
        residual = _frames_conv(self.out_conv, feat)
        return x + residual[:, :, :H, :W]

    def _pad(self, x):
        B, Fr, H, W, C = x.shape
        y = pad_to_multiple(x.reshape(B * Fr, H, W, C).permute(0, 3, 1, 2), self.cfg.pad_multiple)
        return y.permute(0, 2, 3, 1).reshape(B, Fr, y.shape[2], y.shape[3], C)


def build_model(cfg: NetConfig, seed: int = 0, dtype=torch.float32) -> TapeNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TapeNet(cfg)
    return model.to(dtype)


def zero_output_conv(model: TapeNet) -> None:
    with torch.no_grad():
        model.out_conv.weight.zero_()
        model.out_conv.bias.zero_()


def zero_fusion_outputs(module: nn.Module) -> None:
    """Zero every output projection inside the fusion blocks (attention
    projections and MLP output layers), which turns each pair into an identity."""
    with torch.no_grad():
        for name, m in module.named_modules():
            if isinstance(m, nn.Linear) and (name.endswith("proj") or name.endswith("fc2")):
                m.weight.zero_()
                m.bias.zero_()


def restore_window(model: TapeNet, frames: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Numpy convenience wrapper: ``(T, H, W, 3)`` + ``(D, H, W, 3)`` -> ``(T, H, W, 3)``.

    The output is not clamped.
    """
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(frames), dtype=dtype)[None]
    r = torch.as_tensor(np.asarray(refs), dtype=dtype)[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x, r)[0].cpu().numpy()
    model.train(was_training)
    return out
