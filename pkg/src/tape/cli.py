"""``tape`` command line: synth | classify | restore | train | evaluate | profile."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .degradation import DegradationConfig
from .evaluation import evaluate_testset, temporal_profile
from .frame_analysis import CleanSet, DeterministicToyProvider, analyze_clip, load_prompts
from .media_io import FrameSeq, load_frame_dir, resolve_clip_frames, save_frame_dir
from .net.model import NetConfig, build_model
from .pipeline import load_training_clips, restore_clip, synthesize_dataset
from .scenes import make_scene_clip
from .training import (IdentityPerceptualProvider, LossConfig, ToyPerceptualProvider, TrainConfig,
                       load_checkpoint, make_optimizer, save_checkpoint, train)

log = logging.getLogger("tape")

CONFIG_VERSION = 1


@dataclass
class PipelineConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    prompts_path: str | None = None
    provider: str = "toy"
    clip_model_path: str | None = None
    perceptual: str = "toy"
    vgg_weights: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.provider not in ("toy", "external"):
            raise ValueError(f"provider must be 'toy' or 'external', got {self.provider!r}")
        if self.provider == "external" and not self.clip_model_path:
            raise ValueError("provider 'external' needs clip_model_path")
        if self.perceptual not in ("toy", "vgg19", "identity", "none"):
            raise ValueError(f"unknown perceptual provider {self.perceptual!r}")

    def to_dict(self) -> dict:
        return {"version": CONFIG_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        version = d.pop("version", None)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
        sub = {"net": NetConfig, "train": TrainConfig, "loss": LossConfig, "degradation": DegradationConfig}
        for key, typ in sub.items():
            if key in d:
                d[key] = typ(**d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _embedding_provider(cfg: PipelineConfig):
    if cfg.provider == "toy":
        return DeterministicToyProvider(seed=cfg.seed)
    from .frame_analysis import CLIPEmbeddingProvider

    return CLIPEmbeddingProvider(cfg.clip_model_path)


def _perceptual_provider(cfg: PipelineConfig):
    if cfg.perceptual == "toy":
        return ToyPerceptualProvider(seed=cfg.seed)
    if cfg.perceptual == "identity":
        return IdentityPerceptualProvider()
    if cfg.perceptual == "vgg19":
        from .training import VGG19PerceptualProvider

        return VGG19PerceptualProvider(cfg.vgg_weights)
    return None


def _loss_config(cfg: PipelineConfig, provider) -> LossConfig:
    if provider is None:
        return LossConfig(**{**asdict(cfg.loss), "lambda_perc": 0.0})
    return LossConfig(**{**asdict(cfg.loss), "perceptual_layers": tuple(provider.layers)})


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: PipelineConfig, args) -> None:
    with stage("reading sources"):
        sources: dict[str, FrameSeq] = {}
        if args.procedural:
            for i in range(args.procedural):
                sources[f"clip{i:03d}"] = make_scene_clip(cfg.seed * 1000 + i, args.frames, args.size, args.size)
        else:
            if args.source is None:
                raise ValueError("give --source or --procedural")
            src = _require(args.source, "source directory")
            if any(src.glob("*.png")):
                sources[src.name] = load_frame_dir(src)
            else:
                for d in sorted(p for p in src.iterdir() if p.is_dir()):
                    sources[d.name] = load_frame_dir(d)
            if not sources:
                raise ValueError(f"no clips under {src}")
    with stage("synthesizing"):
        written = synthesize_dataset(sources, args.out, cfg.seed, cfg.degradation, dry_run=args.dry_run)
    log.info("wrote %d clips to %s%s", len(written), args.out, " (recipes only)" if args.dry_run else "")


def _classify(cfg: PipelineConfig, seq: FrameSeq, min_refs: int) -> CleanSet:
    prompts = load_prompts(cfg.prompts_path)
    return analyze_clip(_embedding_provider(cfg), seq, prompts, min_refs=min_refs)


def cmd_classify(cfg: PipelineConfig, args) -> None:
    with stage("loading clip"):
        seq = load_frame_dir(resolve_clip_frames(_require(args.clip, "clip")))
        if cfg.prompts_path:
            _require(cfg.prompts_path, "prompt file")
    with stage("classifying"):
        clean = _classify(cfg, seq, cfg.net.D)
    with stage("writing clean set"):
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        clean.save(out)
    if clean.fallback:
        log.warning("fallback: %s", clean.fallback)
    log.info("%d/%d frames clean", clean.n_clean, len(seq))


def cmd_restore(cfg: PipelineConfig, args) -> None:
    with stage("loading checkpoint"):
        model, _, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    with stage("loading clip"):
        seq = load_frame_dir(resolve_clip_frames(_require(args.clip, "clip")))
    with stage("classifying"):
        if args.clean_set:
            clean = CleanSet.load(_require(args.clean_set, "clean set"))
            if len(clean.image_embeddings) != len(seq):
                raise ValueError(f"clean set covers {len(clean.image_embeddings)} frames, clip has {len(seq)}")
        else:
            clean = _classify(cfg, seq, model.cfg.D)
    with stage("restoring"):
        out = restore_clip(model, seq.frames, clean)
    with stage("writing frames"):
        save_frame_dir(FrameSeq(out, seq.fps), args.out)
    log.info("restored %d frames into %s", len(out), args.out)


def cmd_train(cfg: PipelineConfig, args) -> None:
    train_cfg = cfg.train
    if args.steps is not None:
        train_cfg = TrainConfig(**{**asdict(train_cfg), "steps": args.steps})
    with stage("loading data"):
        clips = load_training_clips(_require(args.data, "training data"), _embedding_provider(cfg),
                                    load_prompts(cfg.prompts_path), D=cfg.net.D)
    with stage("building model"):
        if args.resume:
            model, optimizer, header = load_checkpoint(_require(args.resume, "checkpoint"), train_cfg=train_cfg)
            start = int(header["step"])
            if optimizer is None:
                optimizer = make_optimizer(model, train_cfg)
        else:
            model = build_model(cfg.net, seed=cfg.seed)
            optimizer = make_optimizer(model, train_cfg)
            start = 0
        provider = _perceptual_provider(cfg)
    with stage("training"):
        records = train(model, clips, train_cfg, _loss_config(cfg, provider), provider,
                        optimizer=optimizer, start_step=start, log_path=args.log)
    with stage("writing checkpoint"):
        save_checkpoint(model, optimizer, args.checkpoint, step=start + len(records),
                        extra={"config": cfg.to_dict()})
    if records:
        log.info("steps %d..%d, loss %.5f -> %.5f", records[0]["step"], records[-1]["step"],
                 records[0]["loss_total"], records[-1]["loss_total"])


def cmd_evaluate(cfg: PipelineConfig, args) -> None:
    with stage("evaluating"):
        report = evaluate_testset(_require(args.restored, "restored root"), _require(args.gt, "ground-truth root"),
                                  crop=None if args.crop <= 0 else args.crop)
    with stage("writing report"):
        _write_json(args.out, report.to_dict())
    log.info("PSNR %.3f dB, SSIM %.4f over %d videos", report.mean_psnr, report.mean_ssim, len(report.videos))


def cmd_profile(cfg: PipelineConfig, args) -> None:
    with stage("loading clip"):
        seq = load_frame_dir(resolve_clip_frames(_require(args.clip, "clip")))
    with stage("profiling"):
        prof = temporal_profile(seq, args.column, tuple(args.patch) if args.patch else None)
    with stage("writing profile"):
        out = Path(args.out)
        prof.save(out, args.json or out.with_suffix(".json"))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tape", description=__doc__)
    p.add_argument("--config", help="PipelineConfig JSON file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="degrade clean clips into a paired dataset")
    s.add_argument("--source", help="frame directory, or a directory of frame directories")
    s.add_argument("--procedural", type=int, default=0, metavar="N", help="generate N synthetic scenes instead")
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--dry-run", action="store_true", help="write recipes only")

    s = sub.add_parser("classify", help="score frames and write the clean set")
    s.add_argument("--clip", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("restore", help="restore a clip with a trained checkpoint")
    s.add_argument("--clip", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clean-set", help="precomputed clean set JSON")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train on a paired dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--checkpoint", required=True, help="output checkpoint path")
    s.add_argument("--log", help="JSONL loss log")

    s = sub.add_parser("evaluate", help="PSNR/SSIM report for a restored tree")
    s.add_argument("--restored", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--crop", type=int, default=512, help="center crop size; 0 disables")
    s.add_argument("--out", required=True)

    s = sub.add_parser("profile", help="temporal profile of one pixel column")
    s.add_argument("--clip", required=True)
    s.add_argument("--column", type=int, required=True)
    s.add_argument("--patch", type=int, nargs=4, metavar=("TOP", "BOTTOM", "LEFT", "RIGHT"))
    s.add_argument("--out", required=True, help="PNG path")
    s.add_argument("--json", help="metadata path (default: next to the PNG)")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "classify": cmd_classify,
    "restore": cmd_restore,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "profile": cmd_profile,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with stage("reading config"):
            cfg = PipelineConfig.load(_require(args.config, "config")) if args.config else PipelineConfig()
            if args.seed is not None:
                cfg.seed = args.seed
                cfg.train = TrainConfig(**{**asdict(cfg.train), "seed": args.seed})
        COMMANDS[args.command](cfg, args)
    except StageError as exc:
        print(f"tape {args.command}: error while {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
