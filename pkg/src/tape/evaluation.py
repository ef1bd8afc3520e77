"""Full-reference metrics, temporal profiles and test-set reports."""

from __future__ import annotations

import json
import math
import shlex
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .media_io import FrameSeq, center_crop, load_frame_dir, save_image

PSNR_CAP = 99.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_SIGMA = 1.5
SSIM_WIN = 11
LUMA = np.array([0.299, 0.587, 0.114])


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """RGB PSNR with peak 1.0; ``math.inf`` for identical inputs."""
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    r = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")
    return out[r:-r, r:-r]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM on luma with an 11x11 Gaussian window (sigma 1.5), valid region only."""
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        a, b = a @ LUMA, b @ LUMA
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(f"frame {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    g = _gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def clip_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR of a whole clip from the MSE pooled over all frames."""
    return psnr(a, b)


def report_psnr(value: float) -> float:
    return PSNR_CAP if math.isinf(value) else min(value, PSNR_CAP)


# ---------------------------------------------------------------------------
# temporal profile


@dataclass
class TemporalProfile:
    column_index: int
    patch_bounds: tuple[int, int, int, int]
    profile: np.ndarray  # (T, h, 3): row t is the column at frame t

    def save(self, png_path, json_path=None) -> None:
        save_image(self.profile, png_path)
        if json_path is not None:
            Path(json_path).write_text(json.dumps({
                "column_index": self.column_index,
                "patch_bounds": list(self.patch_bounds),
                "shape": list(self.profile.shape),
                "row_deviation": [float(d) for d in profile_row_deviation(self)],
            }, indent=1))


def temporal_profile(seq: FrameSeq, column: int, patch: tuple[int, int, int, int] | None = None) -> TemporalProfile:
    """Stack pixel column ``column`` of a static patch ``(top, bottom, left, right)`` over time."""
    H, W = seq.height, seq.width
    top, bottom, left, right = patch if patch is not None else (0, H, 0, W)
    if not (0 <= top < bottom <= H and 0 <= left < right <= W):
        raise ValueError(f"patch {patch} outside frame {H}x{W}")
    if not left <= column < right:
        raise ValueError(f"column {column} outside patch columns [{left}, {right})")
    prof = seq.frames[:, top:bottom, column, :].copy()
    return TemporalProfile(column, (top, bottom, left, right), prof)


def profile_row_deviation(profile: TemporalProfile) -> np.ndarray:
    """Mean absolute deviation of each time row from the median row."""
    p = profile.profile.astype(np.float64)
    med = np.median(p, axis=0)
    return np.abs(p - med).mean(axis=(1, 2))


def flag_unstable_frames(profile: TemporalProfile, threshold: float) -> np.ndarray:
    return np.flatnonzero(profile_row_deviation(profile) > threshold)


# ---------------------------------------------------------------------------
# reports


@dataclass
class VideoMetrics:
    name: str
    psnr: list[float]
    ssim: list[float]
    psnr_inf: list[bool]
    extra: dict[str, list[float]] = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


@dataclass
class MetricReport:
    videos: list[VideoMetrics]
    crop: int | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([v.mean_psnr for v in self.videos]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([v.mean_ssim for v in self.videos]))

    def to_dict(self) -> dict:
        return {
            "psnr_cap": PSNR_CAP,
            "crop": self.crop,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "videos": [
                {**asdict(v), "mean_psnr": v.mean_psnr, "mean_ssim": v.mean_ssim}
                for v in self.videos
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def evaluate_frames(name: str, restored: np.ndarray, gt: np.ndarray, crop: int | None = 512) -> VideoMetrics:
    if restored.shape != gt.shape:
        raise ValueError(f"video {name}: restored {restored.shape} != gt {gt.shape}")
    ps, ss, inf = [], [], []
    for r, g in zip(restored, gt):
        if crop is not None:
            h, w = min(crop, r.shape[0]), min(crop, r.shape[1])
            r, g = center_crop(r, h, w), center_crop(g, h, w)
        p = psnr(r, g)
        inf.append(math.isinf(p))
        ps.append(report_psnr(p))
        ss.append(ssim(r, g))
    return VideoMetrics(name, ps, ss, inf)


def _gt_dir(root: Path, name: str) -> Path:
    d = root / name
    return d / "gt" if (d / "gt").is_dir() else d


def _restored_dir(root: Path, name: str) -> Path:
    d = root / name
    for sub in ("restored", "degraded"):
        if (d / sub).is_dir():
            return d / sub
    return d


def evaluate_testset(restored_root, gt_root, crop: int | None = 512) -> MetricReport:
    """Per-frame PSNR/SSIM on center crops, averaged per video and then over videos.

    Each video is a subdirectory of both roots; a ``gt/`` (ground truth) or
    ``restored/`` subfolder is used when present.
    """
    restored_root, gt_root = Path(restored_root), Path(gt_root)
    r_names = sorted(p.name for p in restored_root.iterdir() if p.is_dir())
    g_names = sorted(p.name for p in gt_root.iterdir() if p.is_dir())
    if r_names != g_names:
        raise ValueError(f"video trees differ: restored {r_names} vs ground truth {g_names}")
    if not r_names:
        raise ValueError(f"no videos under {restored_root}")
    videos = []
    for name in r_names:
        r = load_frame_dir(_restored_dir(restored_root, name))
        g = load_frame_dir(_gt_dir(gt_root, name))
        if len(r) != len(g):
            raise ValueError(f"video {name}: {len(r)} restored frames vs {len(g)} ground-truth frames")
        videos.append(evaluate_frames(name, r.frames, g.frames, crop))
    return MetricReport(videos, crop)


def run_external_metric(command: str, restored_dir, gt_dir) -> list[float]:
    """Adapter for metrics computed outside this package (LPIPS, VMAF, ...).

    The command is called with the two frame-directory paths appended and must
    print one float per frame.
    """
    argv = shlex.split(command) + [str(restored_dir), str(gt_dir)]
    out = subprocess.run(argv, check=True, capture_output=True, text=True).stdout
    return [float(tok) for tok in out.split()]


def attach_external_metric(report: MetricReport, metric: str, command: str, restored_root, gt_root) -> None:
    restored_root, gt_root = Path(restored_root), Path(gt_root)
    for v in report.videos:
        vals = run_external_metric(command, _restored_dir(restored_root, v.name), _gt_dir(gt_root, v.name))
        if len(vals) != len(v.psnr):
            raise ValueError(f"{metric} returned {len(vals)} values for {len(v.psnr)} frames of {v.name}")
        v.extra[metric] = vals
