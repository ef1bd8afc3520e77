"""Train each fusion/pooling/reference-count variant on the desk fixture.

Short runs only exercise the variants end to end; they say little about
which variant is better.

    python3 scripts/ablations.py --steps 50
"""

import argparse
import json
import logging

from tape.experiments import ABLATIONS, DeskConfig, make_desk_clips, run_ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--only", nargs="*", choices=sorted(ABLATIONS))
    ap.add_argument("--no-classification", action="store_true",
                    help="draw references from all frames instead of the clean set")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = DeskConfig()
    clips = make_desk_clips(cfg)
    rows = {}
    for name in args.only or ABLATIONS:
        res = run_ablation(cfg, name, args.steps, clips,
                           use_classification=False if args.no_classification else None)
        rows[name] = {"restored_psnr": res.restored_psnr, "gain_db": res.gain_db,
                      "final_loss": res.losses[-1] if res.losses else None, "seconds": res.seconds}
        print(name, json.dumps(rows[name]))
    print(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
