"""Command-line entry point: ``flearn {gen-scene,train,bench,report,gradcheck}``.

A JSON config file (``--config``) may carry ``scene``, ``train``, ``model``
and ``bench`` blocks mirroring the dataclass fields; explicit flags win.
Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import __version__, bench, gradcheck
from .models import KINDS, ModelConfig, build_model, canonical_kind
from .scenes import SceneConfig, SceneError, downscale_config, load_scene, make_scene, save_scene, write_pgm
from .training import TrainConfig, init_weights, series_to_csv, train_one_trial

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
OUT_ENV = "FLEARN_OUT_DIR"

log = logging.getLogger("flearn")


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_out(sub: str) -> str:
    return str(Path(os.environ.get(OUT_ENV, "flearn_out")) / sub)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {text!r}")


def _triple(text: str) -> tuple[int, int, int]:
    vals = _int_list(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return vals


def _help(text: str, default) -> str:
    return f"{text} (default: {default})"


S, TR, M = SceneConfig(), TrainConfig(), ModelConfig()


def _add_scene_flags(p):
    g = p.add_argument_group("scene")
    g.add_argument("--size", type=int, help=_help("image side in pixels, power of two", S.size))
    g.add_argument("--grid", type=_grid, help=_help("fragment grid ROWSxCOLS", f"{S.grid_rows}x{S.grid_cols}"))
    g.add_argument("--overlap", type=int, help=_help("tile overlap in pixels, >= 1", S.overlap))
    g.add_argument("--circle", type=_triple, metavar="CX,CY,R",
                   help=_help("circle centre and radius", f"{S.circle_cx},{S.circle_cy},{S.circle_r}"))
    g.add_argument("--square", type=_triple, metavar="TOP,LEFT,SIDE",
                   help=_help("square position and side", f"{S.square_top},{S.square_left},{S.square_side}"))
    g.add_argument("--filled", action="store_true", default=None,
                   help=_help("draw filled shapes instead of outlines", S.filled))
    g.add_argument("--thickness", type=int, help=_help("outline stroke thickness", S.thickness))


def _add_train_flags(p, epochs_default=TR.epochs):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, help=_help("training epochs", epochs_default))
    g.add_argument("--lr", type=float, help=_help("Adam learning rate", TR.learning_rate))
    g.add_argument("--steps-per-epoch", type=int, help=_help("optimizer steps per epoch", TR.steps_per_epoch))
    g.add_argument("--threshold", type=float, help=_help("F1 binarisation threshold", TR.eval_threshold))
    g.add_argument("--snapshots", type=_int_list, metavar="E1,E2,...",
                   help=_help("epochs whose prediction maps are saved", "1,10,25,50"))
    g = p.add_argument_group("model")
    g.add_argument("--hidden", type=int, help=_help("intermediate channels", M.hidden_channels))
    g.add_argument("--activation", action=argparse.BooleanOptionalAction, default=None,
                   help=_help("relu after intermediate convs", M.use_activation))
    g.add_argument("--norm", action=argparse.BooleanOptionalAction, default=None,
                   help=_help("batch-norm after intermediate convs", M.use_norm))
    g.add_argument("--par-merge", choices=("sum", "concat"),
                   help=_help("merge of the parallel variants", M.par_merge))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flearn", description="Frequency-domain feature learning toy experiments: "
                "scene generation, single-trial training, seeded benchmarks, reports and "
                "gradient checks.", epilog="Exit codes: 0 ok, 1 usage, 2 numeric failure, 3 I/O.")
    p.add_argument("--version", action="version", version=f"flearn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scene", help="render a structure and its fragments as PGM files")
    g.add_argument("--config", type=Path, help="JSON config file")
    g.add_argument("--out", help=_help("output directory", f"${OUT_ENV}/scene or flearn_out/scene"))
    _add_scene_flags(g)

    t = sub.add_parser("train", help="train one model on one scene (a single trial)")
    t.add_argument("--config", type=Path, help="JSON config file")
    t.add_argument("--scene", type=Path, help="scene directory (default: generate the default scene)")
    t.add_argument("--model", help=_help(f"model kind, one of {', '.join(KINDS)}", "flearn"))
    t.add_argument("--seed", type=int, help=_help("weight-init seed", TR.seed))
    t.add_argument("--out", help=_help("output directory", f"${OUT_ENV}/train or flearn_out/train"))
    t.add_argument("--reproducible", action="store_true", help="single-threaded BLAS for bitwise repeatability")
    _add_train_flags(t)

    b = sub.add_parser("bench", help="seeded multi-trial comparison of model kinds")
    b.add_argument("--config", type=Path, help="JSON config file")
    b.add_argument("--scene", type=Path, help="scene directory (default: generate from scene flags)")
    b.add_argument("--models", help=_help("comma-separated model kinds", ",".join(KINDS)))
    b.add_argument("--trials", type=int, help=_help("number of seeded trials", 100))
    b.add_argument("--seed", type=int, help=_help("base seed the trial seeds derive from", 0))
    b.add_argument("--jobs", type=int, help=_help("worker processes", 1))
    b.add_argument("--out", help=_help("output directory", f"${OUT_ENV}/bench or flearn_out/bench"))
    b.add_argument("--reproducible", action="store_true", help="single-threaded BLAS in every worker")
    _add_scene_flags(b)
    _add_train_flags(b)

    r = sub.add_parser("report", help="rebuild CSV and SVG reports from a raw.csv")
    r.add_argument("--from", dest="source", type=Path, required=True, help="bench output directory or raw.csv")
    r.add_argument("--out", help="output directory (default: alongside the source)")

    c = sub.add_parser("gradcheck", help="finite-difference check of a model's gradients")
    c.add_argument("--model", default="all", help=_help("model kind or 'all'", "all"))
    c.add_argument("--size", type=int, default=8, help=_help(f"scene side, <= {gradcheck.MAX_SIZE}", 8))
    c.add_argument("--seed", type=int, default=0, help=_help("init seed", 0))
    c.add_argument("--samples", type=int, default=6, help=_help("coordinates probed per parameter tensor", 6))
    return p


# --------------------------------------------------------------------------
# config resolution


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    unknown = set(data) - {"scene", "train", "model", "bench"}
    if unknown:
        raise UsageError(f"config {path}: unknown sections {sorted(unknown)}")
    return data


def _from_block(cls, block: dict, **over):
    names = {f.name for f in fields(cls)}
    bad = set(block) - names
    if bad:
        raise UsageError(f"unknown {cls.__name__} keys {sorted(bad)}")
    merged = {**block, **{k: v for k, v in over.items() if v is not None}}
    return cls(**merged)


def _scene_cfg(args, file_cfg) -> SceneConfig:
    over = {"size": args.size, "overlap": args.overlap, "filled": args.filled,
            "thickness": args.thickness}
    if args.grid is not None:
        over["grid_rows"], over["grid_cols"] = args.grid
    if args.circle is not None:
        over["circle_cx"], over["circle_cy"], over["circle_r"] = args.circle
    if args.square is not None:
        over["square_top"], over["square_left"], over["square_side"] = args.square
    block = dict(file_cfg.get("scene", {}))
    geometry = {"circle_cx", "circle_cy", "circle_r", "square_top", "square_left", "square_side",
                "overlap", "thickness"}
    size = over.pop("size")
    try:
        cfg = _from_block(SceneConfig, {k: v for k, v in block.items() if k != "size"}, **over)
        size = size if size is not None else block.get("size")
        if size is not None and size != cfg.size:
            if geometry & (set(block) | {k for k, v in over.items() if v is not None}):
                cfg = replace(cfg, size=size)
            else:
                cfg = downscale_config(cfg, size)
    except SceneError as exc:
        raise UsageError(str(exc)) from exc
    try:
        cfg.validate()
    except SceneError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _train_cfg(args, file_cfg, seed=None) -> TrainConfig:
    cfg = _from_block(TrainConfig, file_cfg.get("train", {}), learning_rate=args.lr,
                      epochs=args.epochs, steps_per_epoch=args.steps_per_epoch,
                      eval_threshold=args.threshold, seed=seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _model_cfg(args, file_cfg, kind: str) -> ModelConfig:
    return _from_block(ModelConfig, file_cfg.get("model", {}), kind=kind,
                       hidden_channels=args.hidden, use_activation=args.activation,
                       use_norm=args.norm, par_merge=args.par_merge)


def _snapshots(args, file_cfg, epochs: int) -> tuple[int, ...]:
    """Explicit --snapshots are validated; configured or default ones past the run are dropped."""
    if args.snapshots is not None:
        snaps = args.snapshots
    else:
        default = file_cfg.get("bench", {}).get("snapshot_epochs", (1, 10, 25, 50))
        snaps = tuple(e for e in default if e <= epochs)
    bad = [e for e in snaps if not 1 <= e <= epochs]
    if bad:
        raise UsageError(f"snapshot epochs {bad} outside [1, {epochs}]")
    return snaps


def _print_config(title: str, cfg: dict) -> None:
    print(f"# effective {title} config")
    print(json.dumps(cfg, indent=2, sort_keys=True, default=list))


def _read_scene(path: Path):
    """Load a scene directory; unreadable or malformed files are I/O failures."""
    try:
        return load_scene(path)
    except SceneError as exc:
        raise OSError(str(exc)) from exc


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _scene_cfg(args, file_cfg)
    out = Path(args.out or _default_out("scene"))
    _print_config("scene", {"scene": asdict(cfg), "out": str(out)})
    scene = make_scene(cfg)
    save_scene(scene, out)
    print(f"wrote target + {scene.n_fragments} fragments to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from threadpoolctl import threadpool_limits

    file_cfg = _load_config_file(args.config)
    kind = canonical_kind(args.model or file_cfg.get("model", {}).get("kind", "flearn"))
    scene = _read_scene(args.scene) if args.scene else make_scene(_from_block(SceneConfig, file_cfg.get("scene", {})))
    tcfg = _train_cfg(args, file_cfg, seed=args.seed)
    mcfg = replace(_model_cfg(args, file_cfg, kind), in_channels=scene.n_fragments,
                   image_size=scene.config.size)
    snaps = _snapshots(args, file_cfg, tcfg.epochs)
    out = Path(args.out or _default_out("train"))
    _print_config("train", {"train": asdict(tcfg), "model": asdict(mcfg), "scene": asdict(scene.config),
                            "snapshot_epochs": snaps, "reproducible": args.reproducible, "out": str(out)})
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(mcfg)
    init_weights(model, tcfg.seed)
    model.save(out / "initial.ckpt")
    with threadpool_limits(limits=1 if args.reproducible else None):
        series = train_one_trial(kind, scene, tcfg, snapshot_epochs=snaps, model=model)
    (out / "series.csv").write_text(series_to_csv(series), newline="")
    model.save(out / "final.ckpt")
    snapdir = out / "snapshots"
    for e, img in sorted(series.snapshots.items()):
        snapdir.mkdir(exist_ok=True)
        write_pgm(snapdir / bench.snapshot_name(kind, e), bench.probability_to_u8(img, tcfg.eval_threshold))
    (out / "model.txt").write_text(model.summary() + "\n")
    if series.diverged:
        (out / "FAILED").write_text(f"non-finite loss at epoch {series.diverged_epoch}\n")
        raise NumericFailure(f"{kind} diverged at epoch {series.diverged_epoch}")
    print(f"{kind}: final loss {series.loss[-1]:.6f}  F1 {series.f1[-1]:.6f}  -> {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    file_cfg = _load_config_file(args.config)
    bblock = dict(file_cfg.get("bench", {}))
    models = args.models.split(",") if args.models else bblock.get("kinds", list(KINDS))
    try:
        kinds = tuple(canonical_kind(k) for k in models)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    scene = _read_scene(args.scene) if args.scene else None
    scfg = scene.config if scene is not None else _scene_cfg(args, file_cfg)
    tcfg = _train_cfg(args, file_cfg)
    mcfg = _model_cfg(args, file_cfg, kinds[0])
    cfg = bench.BenchmarkConfig(
        kinds=kinds,
        n_trials=args.trials if args.trials is not None else bblock.get("n_trials", 100),
        base_seed=args.seed if args.seed is not None else bblock.get("base_seed", 0),
        train=tcfg, scene=scfg, model=mcfg,
        snapshot_epochs=_snapshots(args, file_cfg, tcfg.epochs),
        snapshot_trial=bblock.get("snapshot_trial", 0),
        jobs=args.jobs if args.jobs is not None else bblock.get("jobs", 1),
        reproducible=args.reproducible or bblock.get("reproducible", False),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out or _default_out("bench"))
    _print_config("bench", {**asdict(cfg), "out": str(out)})

    def progress(kind, trial, series, done, total):
        last = f"{series.f1[-1]:.4f}" if len(series) else "n/a"
        log.info("[%d/%d] %s trial %d seed %d final F1 %s (%.1fs)",
                 done, total, kind, trial, series.seed, last, series.wall_time)

    report = bench.run_benchmark(cfg, scene, progress=progress)
    bench.write_all(cfg, report, out)
    for kind in cfg.kinds:
        curve = report.mean_curve(kind)
        print(f"{kind:<12} mean F1 @epoch {report.epochs}: {curve[-1]:.4f}  "
              f"(n={len(report.completed(kind))})")
    div = report.divergences()
    if div:
        print(f"{len(div)} diverged trial(s) excluded; see divergences.csv")
    print(f"wrote report to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    report = bench.load_report(args.source)
    src_dir = args.source if args.source.is_dir() else args.source.parent
    out = Path(args.out) if args.out else src_dir
    _print_config("report", {"source": str(args.source), "out": str(out)})
    bench.export_csv(report, out)
    bench.export_curves_svg(report, out / "f1_curves.svg")
    print(f"wrote aggregate.csv and f1_curves.svg to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kinds = KINDS if args.model == "all" else (canonical_kind(args.model),)
    if args.size > gradcheck.MAX_SIZE:
        raise UsageError(f"--size {args.size} exceeds {gradcheck.MAX_SIZE}; finite differences "
                         "are too slow at that scale")
    if args.size < 2 or args.size & (args.size - 1):
        raise UsageError("--size must be a power of two >= 2")
    _print_config("gradcheck", {"models": list(kinds), "size": args.size, "seed": args.seed,
                                "samples": args.samples, "tolerance": gradcheck.TOLERANCE})
    failed = []
    for kind in kinds:
        results = gradcheck.check_model(kind, args.size, args.seed, args.samples)
        print(gradcheck.format_table(kind, results))
        failed += [f"{kind}:{r.name}" for r in results if not r.ok]
    if failed:
        raise NumericFailure("gradient check failed for " + ", ".join(failed))
    print("all gradient checks passed")
    return EXIT_OK


COMMANDS = {"gen-scene": cmd_gen_scene, "train": cmd_train, "bench": cmd_bench,
            "report": cmd_report, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help / --version (0) or a usage error (1)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
