"""Seeded multi-trial comparison of the model zoo, plus report writers.

Trial i of every kind uses the same seed ``derive_seed(base_seed, i)``.
Results are keyed by (kind, trial) and assembled after all trials finish,
so the report does not depend on worker count or completion order.
Aggregates are computed on values rounded to the 6 decimals written to
CSV, which keeps them exactly recomputable from the raw file.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .metrics import f1_at_threshold
from .models import DISPLAY_NAMES, KINDS, ModelConfig, canonical_kind
from .scenes import FragmentScene, SceneConfig, make_scene, read_pgm, write_pgm
from .training import EpochSeries, TrainConfig, derive_seed, fmt, train_one_trial

log = logging.getLogger(__name__)

METRICS = ("loss", "precision", "recall", "f1")
RAW_COLUMNS = ("model_kind", "trial", "trial_seed", "epoch") + METRICS
AGG_COLUMNS = ("model_kind", "epoch", "n") + tuple(
    f"{m}_{s}" for m in METRICS for s in ("mean", "std"))


@dataclass
class BenchmarkConfig:
    kinds: tuple[str, ...] = KINDS
    n_trials: int = 100
    base_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    snapshot_epochs: tuple[int, ...] = (1, 10, 25, 50)
    snapshot_trial: int = 0
    jobs: int = 1
    reproducible: bool = True

    def validate(self) -> None:
        self.kinds = tuple(canonical_kind(k) for k in self.kinds)
        if not self.kinds:
            raise ValueError("at least one model kind is required")
        if len(set(self.kinds)) != len(self.kinds):
            raise ValueError(f"duplicate model kinds in {self.kinds}")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        self.train.validate()
        self.scene.validate()
        bad = [e for e in self.snapshot_epochs if not 1 <= e <= self.train.epochs]
        if bad:
            raise ValueError(f"snapshot epochs {bad} outside [1, {self.train.epochs}]")
        if not 0 <= self.snapshot_trial < self.n_trials:
            raise ValueError("snapshot_trial must index an existing trial")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


@dataclass
class BenchmarkReport:
    kinds: tuple[str, ...]
    epochs: int
    trial_seeds: list[int]
    series: dict[tuple[str, int], EpochSeries]
    snapshot_trial: int = 0
    snapshot_epochs: tuple[int, ...] = ()

    @property
    def n_trials(self) -> int:
        return len(self.trial_seeds)

    def completed(self, kind: str) -> list[EpochSeries]:
        return [self.series[(kind, i)] for i in range(self.n_trials)
                if (kind, i) in self.series and not self.series[(kind, i)].diverged]

    def divergences(self) -> list[tuple[str, int, int, int]]:
        """(kind, trial, seed, epoch) for every trial stopped by a non-finite loss."""
        out = []
        for kind in self.kinds:
            for i in range(self.n_trials):
                s = self.series.get((kind, i))
                if s is not None and s.diverged:
                    out.append((kind, i, s.seed, s.diverged_epoch))
        return out

    def values(self, kind: str, metric: str) -> np.ndarray:
        """[n_completed, epochs] array rounded to the CSV precision."""
        rows = [getattr(s, metric) for s in self.completed(kind)]
        if not rows:
            return np.zeros((0, self.epochs))
        return np.round(np.array(rows, dtype=np.float64), 6)

    def mean_curve(self, kind: str, metric: str = "f1") -> np.ndarray:
        v = self.values(kind, metric)
        return v.mean(axis=0) if len(v) else np.full(self.epochs, np.nan)

    def std_curve(self, kind: str, metric: str = "f1") -> np.ndarray:
        v = self.values(kind, metric)
        return v.std(axis=0) if len(v) else np.full(self.epochs, np.nan)

    def epochs_to_fraction(self, kind: str, fraction: float = 0.95, metric: str = "f1") -> int:
        """First epoch (1-based) whose mean reaches ``fraction`` of the final mean.

        Returns ``epochs + 1`` when the curve never gets there (for example
        a final mean that is NaN because every trial diverged).
        """
        curve = self.mean_curve(kind, metric)
        goal = fraction * curve[-1]
        hits = np.flatnonzero(curve >= goal)
        return int(hits[0]) + 1 if len(hits) else self.epochs + 1

    def subset(self, n_trials: int) -> "BenchmarkReport":
        """The first ``n_trials`` trials, as if the run had been that short."""
        if not 1 <= n_trials <= self.n_trials:
            raise ValueError(f"cannot take {n_trials} of {self.n_trials} trials")
        series = {k: v for k, v in self.series.items() if k[1] < n_trials}
        snaps = self.snapshot_epochs if self.snapshot_trial < n_trials else ()
        return BenchmarkReport(self.kinds, self.epochs, self.trial_seeds[:n_trials], series,
                               self.snapshot_trial, snaps)


@dataclass(frozen=True)
class CurveMismatch:
    kind: str
    epoch: int
    value: float
    reference: float


def compare_curves(report: BenchmarkReport, reference: BenchmarkReport, tolerance: float = 0.02,
                   metric: str = "f1") -> list[CurveMismatch]:
    """Per-epoch mean-curve differences larger than ``tolerance``.

    Kinds or epochs missing on either side are reported with NaN values.
    """
    out = []
    for kind in reference.kinds:
        want = reference.mean_curve(kind, metric)
        got = report.mean_curve(kind, metric) if kind in report.kinds else np.full(len(want), np.nan)
        for e in range(max(len(want), len(got))):
            a = got[e] if e < len(got) else math.nan
            b = want[e] if e < len(want) else math.nan
            if not abs(a - b) <= tolerance:
                out.append(CurveMismatch(kind, e + 1, float(a), float(b)))
    return out


# --------------------------------------------------------------------------
# running


def _run_task(args) -> tuple[str, int, EpochSeries]:
    kind, trial, seed, scene, cfg = args
    train_cfg = replace(cfg.train, seed=seed)
    model_cfg = replace(cfg.model, kind=kind, in_channels=scene.n_fragments,
                        image_size=scene.config.size)
    snaps = cfg.snapshot_epochs if trial == cfg.snapshot_trial else ()
    series = train_one_trial(kind, scene, train_cfg, model_cfg, snapshot_epochs=snaps)
    return kind, trial, series


def _worker_init(single_thread: bool):
    if single_thread:
        threadpool_limits(limits=1)


def run_benchmark(cfg: BenchmarkConfig, scene: FragmentScene | None = None,
                  progress=None) -> BenchmarkReport:
    cfg.validate()
    scene = scene if scene is not None else make_scene(cfg.scene)
    seeds = [derive_seed(cfg.base_seed, i) for i in range(cfg.n_trials)]
    tasks = [(kind, i, seeds[i], scene, cfg) for i in range(cfg.n_trials) for kind in cfg.kinds]
    results: dict[tuple[str, int], EpochSeries] = {}

    def collect(kind, trial, series):
        results[(kind, trial)] = series
        if series.diverged:
            log.warning("%s trial %d (seed %d) diverged at epoch %d",
                        kind, trial, series.seed, series.diverged_epoch)
        if progress is not None:
            progress(kind, trial, series, len(results), len(tasks))

    if cfg.jobs == 1:
        with threadpool_limits(limits=1 if cfg.reproducible else None):
            for t in tasks:
                collect(*_run_task(t))
    else:
        with ProcessPoolExecutor(max_workers=cfg.jobs, initializer=_worker_init,
                                 initargs=(cfg.reproducible,)) as pool:
            for out in pool.map(_run_task, tasks):
                collect(*out)

    return BenchmarkReport(kinds=cfg.kinds, epochs=cfg.train.epochs, trial_seeds=seeds,
                           series=results, snapshot_trial=cfg.snapshot_trial,
                           snapshot_epochs=tuple(cfg.snapshot_epochs))


# --------------------------------------------------------------------------
# CSV


def raw_csv(report: BenchmarkReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RAW_COLUMNS)
    for kind in report.kinds:
        for i in range(report.n_trials):
            s = report.series.get((kind, i))
            if s is None or s.diverged:
                continue
            for e in range(report.epochs):
                w.writerow([kind, i, s.seed, e + 1] + [fmt(getattr(s, m)[e]) for m in METRICS])
    return buf.getvalue()


def aggregate_csv(report: BenchmarkReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGG_COLUMNS)
    for kind in report.kinds:
        n = len(report.completed(kind))
        stats = {m: (report.mean_curve(kind, m), report.std_curve(kind, m)) for m in METRICS}
        for e in range(report.epochs):
            row = [kind, e + 1, n]
            for m in METRICS:
                mu, sd = stats[m]
                row += [fmt(mu[e]), fmt(sd[e])]
            w.writerow(row)
    return buf.getvalue()


def divergence_csv(report: BenchmarkReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model_kind", "trial", "trial_seed", "epoch"))
    w.writerows(report.divergences())
    return buf.getvalue()


def export_csv(report: BenchmarkReport, path) -> tuple[Path, Path]:
    """Write raw.csv, aggregate.csv and divergences.csv into directory ``path``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    raw, agg = d / "raw.csv", d / "aggregate.csv"
    raw.write_text(raw_csv(report), newline="")
    agg.write_text(aggregate_csv(report), newline="")
    (d / "divergences.csv").write_text(divergence_csv(report), newline="")
    return raw, agg


def load_report(path) -> BenchmarkReport:
    """Rebuild a report (without snapshots) from a raw.csv file or its directory."""
    p = Path(path)
    if p.is_dir():
        p = p / "raw.csv"
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RAW_COLUMNS:
            raise ValueError(f"{p}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    kinds: list[str] = []
    seeds: dict[int, int] = {}
    series: dict[tuple[str, int], EpochSeries] = {}
    for r in rows:
        kind, trial, seed = r["model_kind"], int(r["trial"]), int(r["trial_seed"])
        if kind not in kinds:
            kinds.append(kind)
        seeds[trial] = seed
        s = series.setdefault((kind, trial), EpochSeries(kind=kind, seed=seed))
        if int(r["epoch"]) != len(s) + 1:
            raise ValueError(f"{p}: epochs out of order for {kind} trial {trial}")
        for m in METRICS:
            getattr(s, m).append(float(r[m]))
    div = p.with_name("divergences.csv")
    if div.exists():
        with open(div, newline="") as fh:
            for r in csv.DictReader(fh):
                t = int(r["trial"])
                seeds[t] = int(r["trial_seed"])
                series[(r["model_kind"], t)] = EpochSeries(
                    kind=r["model_kind"], seed=int(r["trial_seed"]), diverged_epoch=int(r["epoch"]))
                if r["model_kind"] not in kinds:
                    kinds.append(r["model_kind"])
    if not series:
        raise ValueError(f"{p}: no rows")
    epochs = max(len(s) for s in series.values())
    n = max(seeds) + 1
    if sorted(seeds) != list(range(n)):
        raise ValueError(f"{p}: trial indices are not contiguous")
    return BenchmarkReport(kinds=tuple(kinds), epochs=epochs,
                           trial_seeds=[seeds[i] for i in range(n)], series=series)


# --------------------------------------------------------------------------
# SVG curves

SVG_WIDTH, SVG_HEIGHT = 720, 440
PLOT_LEFT, PLOT_RIGHT, PLOT_TOP, PLOT_BOTTOM = 60, 560, 30, 390
PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f")


def _x_of(epoch: int, epochs: int) -> float:
    if epochs == 1:
        return (PLOT_LEFT + PLOT_RIGHT) / 2
    return PLOT_LEFT + (epoch - 1) / (epochs - 1) * (PLOT_RIGHT - PLOT_LEFT)


def _y_of(value: float) -> float:
    return PLOT_BOTTOM - value * (PLOT_BOTTOM - PLOT_TOP)


def curves_svg(report: BenchmarkReport, metric: str = "f1") -> str:
    if not report.kinds or report.epochs < 1 or not report.series:
        raise ValueError("cannot draw curves for an empty report")
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_WIDTH}" '
        f'height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">',
        f'<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
        f'<text x="{(PLOT_LEFT + PLOT_RIGHT) // 2}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">mean {escape(metric)} over '
        f'{report.n_trials} trials</text>',
    ]
    for k in range(5):
        v = k / 4
        y = _y_of(v)
        out.append(f'<line class="grid" x1="{PLOT_LEFT}" y1="{y:.4f}" x2="{PLOT_RIGHT}" '
                   f'y2="{y:.4f}" stroke="#dddddd" stroke-width="1"/>')
        out.append(f'<text x="{PLOT_LEFT - 6}" y="{y + 4:.4f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{v:.2f}</text>')
    out.append(f'<line x1="{PLOT_LEFT}" y1="{PLOT_BOTTOM}" x2="{PLOT_RIGHT}" y2="{PLOT_BOTTOM}" '
               'stroke="black" stroke-width="1"/>')
    out.append(f'<line x1="{PLOT_LEFT}" y1="{PLOT_TOP}" x2="{PLOT_LEFT}" y2="{PLOT_BOTTOM}" '
               'stroke="black" stroke-width="1"/>')
    ticks = sorted({1, report.epochs} | set(range(10, report.epochs + 1, 10)))
    for e in ticks:
        x = _x_of(e, report.epochs)
        out.append(f'<text x="{x:.4f}" y="{PLOT_BOTTOM + 16}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{e}</text>')
    out.append(f'<text x="{(PLOT_LEFT + PLOT_RIGHT) // 2}" y="{PLOT_BOTTOM + 36}" '
               'text-anchor="middle" font-family="sans-serif" font-size="12">epoch</text>')
    for idx, kind in enumerate(report.kinds):
        colour = PALETTE[idx % len(PALETTE)]
        curve = report.mean_curve(kind, metric)
        pts = " ".join(f"{_x_of(e + 1, report.epochs):.4f},{_y_of(v):.4f}"
                       for e, v in enumerate(curve) if not math.isnan(v))
        name = escape(DISPLAY_NAMES.get(kind, kind))
        out.append(f'<polyline data-kind="{escape(kind)}" points="{pts}" fill="none" '
                   f'stroke="{colour}" stroke-width="2"/>')
        ly = PLOT_TOP + 10 + 20 * idx
        out.append(f'<line x1="{PLOT_RIGHT + 20}" y1="{ly}" x2="{PLOT_RIGHT + 44}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{PLOT_RIGHT + 50}" y="{ly + 4}" '
                   f'font-family="sans-serif" font-size="12">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_curves_svg(report: BenchmarkReport, path, metric: str = "f1") -> Path:
    p = Path(path)
    p.write_text(curves_svg(report, metric), newline="")
    return p


# --------------------------------------------------------------------------
# snapshots and manifest


def threshold_level(threshold: float = 0.5) -> int:
    """Grey level that plays the role of ``threshold`` in a stored snapshot."""
    return int(math.floor(threshold * 255.0 + 0.5))


def probability_to_u8(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Round-half-up of prob * 255, kept on the right side of the threshold level.

    At threshold 0.5 plain rounding already splits at 127.5/255 = 0.5.  For
    other thresholds a probability just under ``threshold`` can round up to
    the threshold level (0.25 -> level 64, and 0.2495 -> 63.62 -> 64 too), and
    binarising the PGM would no longer reproduce the F1 of the float scores.
    """
    p = np.asarray(prob, dtype=np.float64)
    cut = threshold_level(threshold)
    v = np.clip(np.floor(p * 255.0 + 0.5), 0, 255)
    v = np.where(p >= threshold, np.maximum(v, cut), np.minimum(v, cut - 1))
    return v.astype(np.uint8)


def snapshot_name(kind: str, epoch: int) -> str:
    return f"{kind}_epoch{epoch:03d}.pgm"


def export_snapshots(report: BenchmarkReport, path, threshold: float = 0.5) -> list[Path]:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for kind in report.kinds:
        s = report.series.get((kind, report.snapshot_trial))
        for e in report.snapshot_epochs:
            if s is None or e not in s.snapshots:
                log.warning("no snapshot for %s trial %d at epoch %d (trial diverged earlier)",
                            kind, report.snapshot_trial, e)
                continue
            p = d / snapshot_name(kind, e)
            write_pgm(p, probability_to_u8(s.snapshots[e], threshold))
            written.append(p)
    return written


def snapshot_f1(path, target: np.ndarray, threshold: float = 0.5) -> float:
    """F1 of a stored prediction PGM, binarised where the quantised value reaches the threshold."""
    img = read_pgm(path)
    hit = (img >= threshold_level(threshold)).astype(np.float64)
    return f1_at_threshold(hit, np.asarray(target).reshape(img.shape), 0.5)[2]


def run_manifest(cfg: BenchmarkConfig, report: BenchmarkReport) -> dict:
    return {
        "software": {"package": "flearn", "version": __version__},
        "config": json.loads(json.dumps(asdict(cfg))),
        "trial_seeds": report.trial_seeds,
        "divergences": [dict(zip(("model_kind", "trial", "trial_seed", "epoch"), d))
                        for d in report.divergences()],
        "wall_clock_seconds": {
            kind: [round(report.series[(kind, i)].wall_time, 3)
                   for i in range(report.n_trials) if (kind, i) in report.series]
            for kind in report.kinds
        },
    }


def write_run_manifest(cfg: BenchmarkConfig, report: BenchmarkReport, path) -> Path:
    p = Path(path)
    p.write_text(json.dumps(run_manifest(cfg, report), indent=2) + "\n")
    return p


def write_all(cfg: BenchmarkConfig, report: BenchmarkReport, outdir) -> dict[str, Path]:
    d = Path(outdir)
    d.mkdir(parents=True, exist_ok=True)
    raw, agg = export_csv(report, d)
    svg = export_curves_svg(report, d / "f1_curves.svg")
    snaps = (export_snapshots(report, d / "snapshots", cfg.train.eval_threshold)
             if report.snapshot_epochs else [])
    manifest = write_run_manifest(cfg, report, d / "run_manifest.json")
    return {"raw": raw, "aggregate": agg, "svg": svg, "manifest": manifest,
            "snapshots": d / "snapshots" if snaps else None}

