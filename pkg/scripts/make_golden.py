"""Run the full default benchmark (6 kinds x 100 trials x 50 epochs) into golden/.

The resulting raw.csv / aggregate.csv are the repository's reference curves;
``check_golden.py`` compares later runs against them with a 0.02 tolerance.

    python3 scripts/make_golden.py [--out golden] [--jobs N] [--trials 100]
"""
from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

from flearn import bench

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=ROOT / "golden")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--trials", type=int, default=100)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = bench.BenchmarkConfig(n_trials=args.trials, jobs=args.jobs, reproducible=True)
    t0 = time.time()

    def progress(kind, trial, series, done, total):
        logging.info("[%d/%d] %-12s trial %3d final F1 %.4f (%.1fs, %.0fs elapsed)", done, total,
                     kind, trial, series.f1[-1] if len(series) else float("nan"),
                     series.wall_time, time.time() - t0)

    report = bench.run_benchmark(cfg, progress=progress)
    bench.write_all(cfg, report, args.out)
    for kind in cfg.kinds:
        print(f"{kind:<12} final mean F1 {report.mean_curve(kind)[-1]:.4f}  "
              f"epochs to 95%: {report.epochs_to_fraction(kind)}")
    print(f"wrote {args.out} in {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
