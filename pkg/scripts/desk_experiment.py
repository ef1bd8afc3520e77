"""Train the reduced profile on synthetic clips and report held-out PSNR.

    python3 scripts/desk_experiment.py --steps 400 --out runs/desk
"""

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from tape.experiments import DeskConfig, make_desk_clips, run_desk_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=DeskConfig().train.steps)
    ap.add_argument("--lr", type=float, default=DeskConfig().train.lr)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = DeskConfig(seed=args.seed)
    cfg = replace(cfg, net=replace(cfg.net, C=args.channels),
                  train=replace(cfg.train, steps=args.steps, lr=args.lr, seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips = make_desk_clips(cfg)
    log_path = out / "loss.jsonl"
    log_path.unlink(missing_ok=True)
    res = run_desk_experiment(cfg, clips, log_path=log_path)
    summary = {
        "degraded_psnr": res.degraded_psnr,
        "restored_psnr": res.restored_psnr,
        "gain_db": res.gain_db,
        "block_means": res.block_means,
        "monotone": res.monotone,
        "seconds": res.seconds,
        "clean_counts": res.clean_counts,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
