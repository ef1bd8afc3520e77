"""Zero-shot clean-frame detection and reference selection.

Frames are scored by cosine similarity between their image embedding and an
ensemble of text embeddings describing artifacts (higher = more degraded).
Otsu's method on the per-video score histogram splits clean from degraded
frames, and each input window takes the clean frames most similar to its
center frame as references.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .media_io import FrameSeq

DEFAULT_BINS = 256
# Candidates whose within-class variance is this close (relative) to the
# minimum count as tied; the lowest threshold wins.
TIE_RTOL = 1e-9


class DegenerateHistogramError(ValueError):
    """All scores are identical, so no threshold separates two classes."""


class EmbeddingProvider(Protocol):
    dim: int

    def embed_image(self, frame: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / n


def high_frequency_energy(frame: np.ndarray) -> float:
    """Mean absolute first difference along both axes, over all channels."""
    f = np.asarray(frame, dtype=np.float64)
    dy = np.abs(np.diff(f, axis=0)).mean() if f.shape[0] > 1 else 0.0
    dx = np.abs(np.diff(f, axis=1)).mean() if f.shape[1] > 1 else 0.0
    return float(dy + dx)


class DeterministicToyProvider:
    """Offline stand-in for a vision-language embedding model.

    The embedding space is split into three orthogonal blocks:

    * axis 0 is the degradation direction,
    * axes ``1 .. text_dims`` hold hash-derived text components,
    * the remaining axes hold a fixed random projection of an 8x8 thumbnail.

    Text embeddings are the degradation axis plus a small hash term, so any
    prompt ensemble points mostly along axis 0. Image embeddings carry
    ``gain * degradation_fn(frame)`` on axis 0, which makes the score a strictly
    increasing function of ``degradation_fn`` for every frame content.
    """

    def __init__(self, dim: int = 64, text_dims: int = 16, gain: float = 10.0,
                 text_noise: float = 0.3, seed: int = 0,
                 degradation_fn: Callable[[np.ndarray], float] | None = None,
                 thumb: int = 8):
        if dim < text_dims + 2:
            raise ValueError("dim too small for the block layout")
        self.dim = dim
        self.text_dims = text_dims
        self.gain = gain
        self.text_noise = text_noise
        self.degradation_fn = degradation_fn or high_frequency_energy
        self.thumb = thumb
        content_dims = dim - 1 - text_dims
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((content_dims, thumb * thumb * 3)) / np.sqrt(thumb * thumb * 3)

    def _thumbnail(self, frame: np.ndarray) -> np.ndarray:
        f = np.asarray(frame, dtype=np.float64)
        h, w = f.shape[:2]
        ys = np.linspace(0, h, self.thumb + 1).astype(int)
        xs = np.linspace(0, w, self.thumb + 1).astype(int)
        out = np.empty((self.thumb, self.thumb, 3))
        for i in range(self.thumb):
            for j in range(self.thumb):
                cell = f[ys[i]:max(ys[i + 1], ys[i] + 1), xs[j]:max(xs[j + 1], xs[j] + 1)]
                out[i, j] = cell.reshape(-1, 3).mean(axis=0)
        return out.ravel()

    def embed_image(self, frame: np.ndarray) -> np.ndarray:
        thumb = self._thumbnail(frame)
        content = self._proj @ (thumb - thumb.mean())
        norm = np.linalg.norm(content)
        content = content / norm if norm > 0 else np.zeros_like(content)
        v = np.zeros(self.dim)
        v[0] = self.gain * self.degradation_fn(frame)
        v[1 + self.text_dims:] = content
        if not v.any():
            v[-1] = 1.0
        return _unit(v)

    def embed_text(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = np.zeros(self.dim)
        v[0] = 1.0
        v[1:1 + self.text_dims] = self.text_noise * _unit(rng.standard_normal(self.text_dims))
        return _unit(v)


class CLIPEmbeddingProvider:
    """Adapter for a local Hugging Face CLIP checkpoint (optional extra ``clip``).

    Frames are passed to the CLIP processor at full resolution; the processor
    resizes and center-crops to the model's input size.
    """

    def __init__(self, model_path: str, device: str = "cpu"):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self.model = CLIPModel.from_pretrained(model_path).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_path)
        self.device = device
        self.dim = self.model.config.projection_dim

    def embed_image(self, frame: np.ndarray) -> np.ndarray:
        data = (np.clip(frame, 0, 1) * 255).round().astype(np.uint8)
        inputs = self.processor(images=data, return_tensors="pt").to(self.device)
        with self._torch.no_grad():
            v = self.model.get_image_features(**inputs)[0].double().cpu().numpy()
        return _unit(v)

    def embed_text(self, text: str) -> np.ndarray:
        inputs = self.processor(text=[text], return_tensors="pt", padding=True).to(self.device)
        with self._torch.no_grad():
            v = self.model.get_text_features(**inputs)[0].double().cpu().numpy()
        return _unit(v)


def default_prompts() -> list[str]:
    text = resources.files("tape").joinpath("data/prompts.txt").read_text(encoding="utf-8")
    return read_prompt_text(text)


def read_prompt_text(text: str) -> list[str]:
    return [line.strip() for line in text.splitlines() if line.strip()]


def load_prompts(path=None) -> list[str]:
    if path is None:
        return default_prompts()
    return read_prompt_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class PromptEnsemble:
    prompts: list[str]
    vector: np.ndarray


def ensemble_prompts(provider: EmbeddingProvider, prompts: Sequence[str]) -> PromptEnsemble:
    prompts = list(prompts)
    if not prompts:
        raise ValueError("prompt list is empty")
    mean = np.mean([provider.embed_text(p) for p in prompts], axis=0)
    if np.linalg.norm(mean) < 1e-12:
        raise ValueError("prompt embeddings average to zero")
    return PromptEnsemble(prompts, _unit(mean))


def score_frames(provider: EmbeddingProvider, seq: FrameSeq | np.ndarray,
                 ensemble: PromptEnsemble) -> tuple[np.ndarray, np.ndarray]:
    frames = seq.frames if isinstance(seq, FrameSeq) else np.asarray(seq)
    if len(frames) == 0:
        raise ValueError("no frames to score")
    embeddings = []
    for i, frame in enumerate(frames):
        try:
            embeddings.append(np.asarray(provider.embed_image(frame), dtype=np.float64))
        except Exception as exc:
            raise RuntimeError(f"embedding provider failed on frame {i}: {exc}") from exc
    embeddings = np.stack(embeddings)
    scores = embeddings @ ensemble.vector
    return scores, embeddings


# ---------------------------------------------------------------------------
# Otsu


def _histogram(scores, bins):
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    if hi == lo:
        raise DegenerateHistogramError("all scores are identical")
    width = (hi - lo) / bins
    idx = np.minimum(((s - lo) / width).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    centers = lo + (np.arange(bins) + 0.5) * width
    return counts, centers, lo, width


def _pick(within: np.ndarray) -> int:
    best = within.min()
    tol = TIE_RTOL * max(abs(best), np.finfo(float).tiny)
    return int(np.flatnonzero(within <= best + tol)[0])


def otsu_threshold(scores, bins: int = DEFAULT_BINS) -> float:
    """Histogram Otsu threshold over ``[min(scores), max(scores)]``.

    Candidate thresholds are the interior bin edges; the one minimizing the
    weighted within-class variance of bin centers wins, lowest edge on ties.
    Raises :class:`DegenerateHistogramError` when all scores are equal.
    """
    if len(scores) < 2:
        raise ValueError("need at least two scores")
    if bins < 2:
        raise ValueError("need at least two bins")
    counts, centers, lo, width = _histogram(scores, bins)
    n = counts.sum()
    # centering keeps the sum-of-squares form well conditioned
    c = centers - (counts * centers).sum() / n
    w0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * c)[:-1]
    q0 = np.cumsum(counts * c ** 2)[:-1]
    w1, s1, q1 = n - w0, (counts * c).sum() - s0, (counts * c ** 2).sum() - q0
    with np.errstate(invalid="ignore", divide="ignore"):
        v0 = np.where(w0 > 0, q0 - s0 ** 2 / w0, 0.0)
        v1 = np.where(w1 > 0, q1 - s1 ** 2 / w1, 0.0)
    within = np.maximum(v0, 0.0) + np.maximum(v1, 0.0)
    k = _pick(within) + 1
    return lo + k * width


def classify_frames(scores, threshold: float) -> np.ndarray:
    return np.flatnonzero(np.asarray(scores) < threshold)


@dataclass
class CleanSet:
    scores: np.ndarray
    threshold: float | None
    clean_indices: np.ndarray
    image_embeddings: np.ndarray
    prompts: list[str] = field(default_factory=list)
    fallback: str | None = None

    @property
    def n_clean(self) -> int:
        return len(self.clean_indices)

    def to_dict(self) -> dict:
        return {
            "scores": [float(s) for s in self.scores],
            "threshold": None if self.threshold is None else float(self.threshold),
            "clean_indices": [int(i) for i in self.clean_indices],
            "prompts": list(self.prompts),
            "fallback": self.fallback,
            "image_embeddings": [[float(x) for x in e] for e in self.image_embeddings],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CleanSet":
        return cls(
            scores=np.asarray(d["scores"], dtype=np.float64),
            threshold=d["threshold"],
            clean_indices=np.asarray(d["clean_indices"], dtype=np.int64),
            image_embeddings=np.asarray(d["image_embeddings"], dtype=np.float64),
            prompts=list(d.get("prompts", [])),
            fallback=d.get("fallback"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "CleanSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_clean_set(scores, embeddings, *, bins: int = DEFAULT_BINS, min_refs: int = 1,
                    use_classification: bool = True, prompts=()) -> CleanSet:
    """Otsu split with fallbacks.

    All-equal scores mark every frame clean; an empty clean set is replaced by
    the ``min_refs`` lowest-score frames. ``use_classification=False`` makes every
    frame a reference candidate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if not use_classification:
        return CleanSet(scores, None, np.arange(n), embeddings, list(prompts), "classification disabled")
    if n < 2:
        return CleanSet(scores, None, np.arange(n), embeddings, list(prompts), "single frame: all clean")
    try:
        threshold = otsu_threshold(scores, bins)
    except DegenerateHistogramError:
        return CleanSet(scores, None, np.arange(n), embeddings, list(prompts),
                        "degenerate histogram: all scores equal, all frames clean")
    clean = classify_frames(scores, threshold)
    fallback = None
    if len(clean) == 0:
        clean = np.sort(np.argsort(scores, kind="stable")[:min(min_refs, n)])
        fallback = "empty clean set: lowest-score frames used"
    return CleanSet(scores, threshold, clean, embeddings, list(prompts), fallback)


def analyze_clip(provider: EmbeddingProvider, seq, prompts=None, *, bins: int = DEFAULT_BINS,
                 min_refs: int = 1, use_classification: bool = True) -> CleanSet:
    prompts = default_prompts() if prompts is None else list(prompts)
    ensemble = ensemble_prompts(provider, prompts)
    scores, embeddings = score_frames(provider, seq, ensemble)
    return build_clean_set(scores, embeddings, bins=bins, min_refs=min_refs,
                           use_classification=use_classification, prompts=prompts)


# ---------------------------------------------------------------------------
# references


@dataclass
class ReferenceSet:
    window_center: int
    indices: list[int]
    similarities: list[float]


def select_references(clean: CleanSet, center_embedding: np.ndarray, D: int,
                      window_center: int = -1) -> ReferenceSet:
    """Top-``D`` clean frames by cosine similarity, ties to the lower index.

    With fewer than ``D`` candidates the ranking is repeated cyclically.
    """
    if D < 1:
        raise ValueError("D must be >= 1")
    pool = np.asarray(clean.clean_indices, dtype=np.int64)
    if len(pool) == 0:
        raise ValueError("clean set is empty")
    sims = clean.image_embeddings[pool] @ np.asarray(center_embedding, dtype=np.float64)
    order = np.lexsort((pool, -sims))
    ranked = [(int(pool[k]), float(sims[k])) for k in order]
    picked = [ranked[i % len(ranked)] for i in range(D)]
    return ReferenceSet(window_center, [i for i, _ in picked], [s for _, s in picked])


# ---------------------------------------------------------------------------
# evaluation against oracle labels


@dataclass
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    undefined: list[str] = field(default_factory=list)


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def classification_report(predicted_clean, oracle_clean, n: int) -> ClassificationMetrics:
    """Binary metrics with clean frames as the positive class."""
    pred, true = set(map(int, predicted_clean)), set(map(int, oracle_clean))
    for s in (pred, true):
        if any(i < 0 or i >= n for i in s):
            raise ValueError(f"indices must lie in [0, {n})")
    tp = len(pred & true)
    fp = len(pred - true)
    fn = len(true - pred)
    tn = n - tp - fp - fn
    undefined: list[str] = []
    acc = _ratio(tp + tn, n, "accuracy", undefined)
    p = _ratio(tp, tp + fp, "precision", undefined)
    r = _ratio(tp, tp + fn, "recall", undefined)
    f1 = _ratio(2 * p * r, p + r, "f1", undefined)
    return ClassificationMetrics(acc, p, r, f1, tp, fp, fn, tn, undefined)
