"""Losses, window sampling, AdamW steps, training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .frame_analysis import CleanSet, select_references
from .net.model import NetConfig, TapeNet, build_model

log = logging.getLogger(__name__)

PERCEPTUAL_LAYERS = ("relu2_2", "relu3_4", "relu4_4", "conv5_4")


@dataclass
class LossConfig:
    epsilon: float = 1e-12
    lambda_char: float = 200.0
    lambda_perc: float = 1.0
    perceptual_layers: tuple[str, ...] = PERCEPTUAL_LAYERS

    def __post_init__(self):
        self.perceptual_layers = tuple(self.perceptual_layers)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lambda_char < 0 or self.lambda_perc < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 100
    steps: int | None = None
    lr: float = 2e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.99)
    crop: int = 128
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs <= 0 or self.crop <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, crop and batch_size must be positive")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# losses


def _to_nchw(x: torch.Tensor) -> torch.Tensor:
    # (..., H, W, 3) -> (N, 3, H, W)
    return x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)


def charbonnier_loss(restored: torch.Tensor, target: torch.Tensor, epsilon: float = 1e-12) -> torch.Tensor:
    if restored.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(restored.shape)} vs {tuple(target.shape)}")
    d = restored - target
    return torch.sqrt(d * d + epsilon ** 2).mean()


class IdentityPerceptualProvider(nn.Module):
    """One 'layer' that returns the image itself."""

    layers = ("identity",)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [x]


class ToyPerceptualProvider(nn.Module):
    """Small frozen random conv stack tapped at four depths, named after the VGG-19 taps."""

    layers = PERCEPTUAL_LAYERS

    def __init__(self, seed: int = 0, width: int = 8):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.block1 = nn.Sequential(nn.Conv2d(3, width, 3, padding=1), nn.ReLU(),
                                        nn.Conv2d(width, width, 3, padding=1), nn.ReLU())
            self.block2 = nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU())
            self.block3 = nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU())
            self.block4 = nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(2 * width, 2 * width, 3, padding=1))
        self.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = x.to(self.block1[0].weight.dtype)
        f1 = self.block1(x)
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        f4 = self.block4(f3)
        return [f1, f2, f3, f4]


class VGG19PerceptualProvider(nn.Module):
    """torchvision VGG-19 tapped at relu2_2, relu3_4, relu4_4 and conv5_4.

    ``weights_path`` points to a torchvision ``vgg19`` state dict; without it the
    network keeps its random initialization.
    """

    layers = PERCEPTUAL_LAYERS
    _taps = (8, 17, 26, 34)

    def __init__(self, weights_path=None):
        super().__init__()
        from torchvision.models import vgg19

        net = vgg19(weights=None)
        if weights_path is not None:
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.body = net.features[: self._taps[-1] + 1]
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def features(self, x):
        x = (x - self.mean) / self.std
        out = []
        for i, layer in enumerate(self.body):
            x = layer(x)
            if i in self._taps:
                out.append(x)
        return out


def perceptual_loss(provider, restored: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum over layers of ``||phi(a) - phi(b)||^2 / (C H W)``, averaged over frames."""
    if restored.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(restored.shape)} vs {tuple(target.shape)}")
    fa = provider.features(_to_nchw(restored))
    with torch.no_grad():
        fb = provider.features(_to_nchw(target))
    if len(fa) != len(provider.layers):
        raise ValueError(f"provider returned {len(fa)} maps for {len(provider.layers)} layers")
    total = restored.new_zeros(())
    for a, b in zip(fa, fb):
        total = total + ((a - b) ** 2).mean(dim=(1, 2, 3)).mean()
    return total


def total_loss(cfg: LossConfig, provider, restored, target) -> tuple[torch.Tensor, dict]:
    if provider is not None and tuple(provider.layers) != cfg.perceptual_layers:
        raise ValueError(f"provider layers {provider.layers} do not match config {cfg.perceptual_layers}")
    l_char = charbonnier_loss(restored, target, cfg.epsilon)
    if cfg.lambda_perc > 0 and provider is not None:
        l_perc = perceptual_loss(provider, restored, target)
    else:
        l_perc = restored.new_zeros(())
    loss = cfg.lambda_char * l_char + cfg.lambda_perc * l_perc
    parts = {"loss_char": l_char.detach().item(), "loss_perc": l_perc.detach().item(),
             "loss_total": loss.detach().item()}
    return loss, parts


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingClip:
    degraded: np.ndarray
    gt: np.ndarray
    clean: CleanSet
    name: str = ""

    def __post_init__(self):
        if self.degraded.shape != self.gt.shape:
            raise ValueError(f"clip {self.name}: degraded {self.degraded.shape} != gt {self.gt.shape}")


def window_references(clean: CleanSet, center: int, D: int, window: range | None = None) -> list[int]:
    """Reference indices for one window; frames inside the window are skipped
    when enough other clean frames exist."""
    if window is not None:
        outside = np.array([i for i in clean.clean_indices if i not in window], dtype=np.int64)
        if len(outside):
            clean = CleanSet(clean.scores, clean.threshold, outside, clean.image_embeddings,
                             clean.prompts, clean.fallback)
    return select_references(clean, clean.image_embeddings[center], D, center).indices


def sample_training_window(clips: list[TrainingClip], rng: np.random.Generator, T: int, D: int,
                           crop: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One ``(input T frames, GT T frames, D references)`` triple sharing a crop."""
    c = int(rng.integers(len(clips)))
    clip = clips[c]
    n, H, W = clip.degraded.shape[:3]
    if n < T:
        raise ValueError(f"clip {clip.name or c} has {n} frames, needs at least {T}")
    start = int(rng.integers(0, n - T + 1))
    ch, cw = min(crop, H), min(crop, W)
    y0 = int(rng.integers(0, H - ch + 1))
    x0 = int(rng.integers(0, W - cw + 1))
    window = range(start, start + T)
    refs = window_references(clip.clean, start + T // 2, D, window)
    sl = (slice(y0, y0 + ch), slice(x0, x0 + cw))
    return (clip.degraded[start:start + T, sl[0], sl[1]],
            clip.gt[start:start + T, sl[0], sl[1]],
            clip.degraded[refs][:, sl[0], sl[1]])


def sample_batch(clips, rng, T, D, crop, batch_size, dtype=torch.float32):
    samples = [sample_training_window(clips, rng, T, D, crop) for _ in range(batch_size)]
    return tuple(torch.as_tensor(np.stack(parts), dtype=dtype) for parts in zip(*samples))


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


# ---------------------------------------------------------------------------
# optimization


def make_optimizer(model: TapeNet, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.trainable_parameters(), lr=cfg.lr, betas=cfg.betas,
                             weight_decay=cfg.weight_decay, eps=1e-8)


def train_step(model: TapeNet, batch, optimizer, loss_cfg: LossConfig, provider) -> dict:
    x, gt, refs = batch
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(x, refs)
    loss, parts = total_loss(loss_cfg, provider, out, gt)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss {parts}; input range [{float(x.min())}, {float(x.max())}], "
            f"output finite: {bool(torch.isfinite(out).all())}"
        )
    loss.backward()
    optimizer.step()
    return parts


def windows_per_epoch(clips: list[TrainingClip], T: int) -> int:
    return sum(max(0, len(c.degraded) - T + 1) for c in clips)


def train(model: TapeNet, clips: list[TrainingClip], train_cfg: TrainConfig, loss_cfg: LossConfig,
          provider, *, optimizer=None, start_step: int = 0, steps: int | None = None,
          log_path=None, checkpoint_path=None) -> list[dict]:
    """Run steps ``start_step .. start_step + steps``; returns per-step log records.

    The sample drawn at step ``k`` depends only on ``(seed, k)``, so a resumed
    run reproduces the uninterrupted one.
    """
    cfg = model.cfg
    if optimizer is None:
        optimizer = make_optimizer(model, train_cfg)
    if steps is None:
        steps = train_cfg.steps if train_cfg.steps is not None else \
            train_cfg.epochs * windows_per_epoch(clips, cfg.T) // train_cfg.batch_size
    dtype = next(model.parameters()).dtype
    records = []
    fh = open(log_path, "a") if log_path else None
    t0 = time.time()
    try:
        for step in range(start_step, start_step + steps):
            batch = sample_batch(clips, step_rng(train_cfg.seed, step), cfg.T, cfg.D,
                                 train_cfg.crop, train_cfg.batch_size, dtype)
            parts = train_step(model, batch, optimizer, loss_cfg, provider)
            rec = {"step": step, **parts, "wallclock": round(time.time() - t0, 4)}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if step % 50 == 0:
                log.info("step %d loss %.5f", step, parts["loss_total"])
            every = train_cfg.checkpoint_every
            if checkpoint_path and every and (step + 1) % every == 0:
                save_checkpoint(model, optimizer, checkpoint_path, step=step + 1)
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_checkpoint(model, optimizer, checkpoint_path, step=start_step + steps)
    return records


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"TAPECKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64"}
_NP_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


def _optimizer_tensors(model: TapeNet, optimizer) -> tuple[dict, dict]:
    names = {id(p): n for n, p in model.named_parameters()}
    tensors, meta = {}, {"param_groups": []}
    for group in optimizer.param_groups:
        g = {k: v for k, v in group.items() if k != "params"}
        g["betas"] = list(g["betas"])
        g["params"] = [names[id(p)] for p in group["params"]]
        meta["param_groups"].append(g)
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            for key, val in state.items():
                tensors[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(val)
    return tensors, meta


def save_checkpoint(model: TapeNet, optimizer, path, step: int = 0, extra: dict | None = None) -> None:
    """Single-file checkpoint: magic, u64 header length, JSON header, raw tensors."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    optim_meta = None
    if optimizer is not None:
        opt_tensors, optim_meta = _optimizer_tensors(model, optimizer)
        tensors.update(opt_tensors)
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        data = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPES[t.dtype],
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "net_config": model.cfg.to_dict(),
        "step": step,
        "optimizer": optim_meta,
        "extra": extra or {},
        "tensors": entries,
    }
    raw = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for data in blobs:
            f.write(data)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}")
        data = f.read()
    arrays = {}
    for e in header["tensors"]:
        buf = data[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=_NP_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path, net_config: NetConfig | None = None, train_cfg: TrainConfig | None = None):
    """Returns ``(model, optimizer or None, header)``.

    ``net_config`` overrides the stored config; every tensor is validated
    against the model it builds.
    """
    header, arrays = read_checkpoint(path)
    cfg = net_config or NetConfig.from_dict(header["net_config"])
    dtype = torch.float64 if arrays and next(iter(arrays.values())).dtype == np.float64 else torch.float32
    model = build_model(cfg, dtype=dtype)
    state = model.state_dict()
    loaded = {}
    for name, arr in arrays.items():
        if not name.startswith("model."):
            continue
        key = name[len("model."):]
        if key not in state:
            raise CheckpointError(f"tensor {key!r} in checkpoint has no counterpart in the model config")
        if tuple(state[key].shape) != arr.shape:
            raise CheckpointError(
                f"tensor {key!r}: checkpoint shape {arr.shape} != config shape {tuple(state[key].shape)}"
            )
        loaded[key] = torch.from_numpy(arr)
    missing = set(state) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    model.load_state_dict(loaded)

    optimizer = None
    meta = header.get("optimizer")
    if meta is not None:
        params = dict(model.named_parameters())
        g = meta["param_groups"][0]
        tc = train_cfg or TrainConfig(lr=g["lr"], weight_decay=g["weight_decay"], betas=tuple(g["betas"]))
        optimizer = make_optimizer(model, tc)
        for pname in g["params"]:
            p = params[pname]
            st = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                arr = arrays.get(f"optim.{pname}.{key}")
                if arr is not None:
                    st[key] = torch.from_numpy(arr)
            if st:
                if st["exp_avg"].shape != tuple(p.shape):
                    raise CheckpointError(f"optimizer moment for {pname!r} has shape {st['exp_avg'].shape}")
                optimizer.state[p] = st
    return model, optimizer, header
