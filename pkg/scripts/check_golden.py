"""Compare a benchmark run against the golden reference curves (tolerance 0.02).

    python3 scripts/check_golden.py RUN_DIR            # compare an existing run
    python3 scripts/check_golden.py --rerun [--jobs N] # rerun all 100 trials first

When the run has fewer trials than the reference, the reference is cut to
the same leading trials (trial seeds are derived from the trial index).
Exit status is 1 when any (kind, epoch) mean differs by more than the tolerance.
"""
from __future__ import annotations

import argparse
import sys
import tempfile
from pathlib import Path

from flearn import bench

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run", nargs="?", type=Path, help="bench output directory or raw.csv")
    ap.add_argument("--golden", type=Path, default=ROOT / "golden")
    ap.add_argument("--rerun", action="store_true", help="run the full benchmark now")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--tolerance", type=float, default=0.02)
    args = ap.parse_args()
    if (args.run is None) == (not args.rerun):
        ap.error("give either a RUN directory or --rerun")

    golden = bench.load_report(args.golden)
    if args.rerun:
        cfg = bench.BenchmarkConfig(n_trials=golden.n_trials, jobs=args.jobs, reproducible=True)
        report = bench.run_benchmark(cfg)
        out = Path(tempfile.mkdtemp(prefix="flearn_golden_check_"))
        bench.write_all(cfg, report, out)
        print(f"rerun written to {out}")
    else:
        report = bench.load_report(args.run)
    if report.n_trials < golden.n_trials:
        golden = golden.subset(report.n_trials)
    if report.trial_seeds != golden.trial_seeds:
        print("trial seeds differ from the reference; base seeds do not match")
        return 1
    bad = bench.compare_curves(report, golden, args.tolerance)
    for m in bad[:20]:
        print(f"  {m.kind} epoch {m.epoch}: {m.value:.6f} vs reference {m.reference:.6f}")
    print(f"{len(bad)} of {len(golden.kinds) * golden.epochs} curve points outside "
          f"+-{args.tolerance} over {golden.n_trials} trials")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
