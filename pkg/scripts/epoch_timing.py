"""Seconds per training epoch for each model kind on the default 128x128 scene.

    python3 scripts/epoch_timing.py [--epochs 3] [--size 128]

Useful for sizing a benchmark: a full run costs about
n_trials * 50 * sum(per-kind seconds) / jobs.
"""
from __future__ import annotations

import argparse

from threadpoolctl import threadpool_limits

from flearn.models import KINDS
from flearn.scenes import SceneConfig, downscale_config, make_scene
from flearn.training import TrainConfig, train_one_trial


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--size", type=int, default=128)
    args = ap.parse_args()
    cfg = SceneConfig() if args.size == 128 else downscale_config(SceneConfig(), args.size)
    scene = make_scene(cfg)
    total = 0.0
    with threadpool_limits(limits=1):
        for kind in KINDS:
            s = train_one_trial(kind, scene, TrainConfig(epochs=args.epochs))
            per = s.wall_time / args.epochs
            total += per
            print(f"{kind:<12} {per:.3f} s/epoch")
    print(f"{'all kinds':<12} {total:.3f} s/epoch -> ~{total * 50 / 60:.1f} min per 50-epoch trial set")


if __name__ == "__main__":
    main()
