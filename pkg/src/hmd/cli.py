"""Batch command line for the mitosis detection pipeline.

Single-process tool: every command reads its inputs, writes artifacts
under --out, and exits nonzero on any failure. Movie-level work may run
on a small thread pool; the HMD_THREADS environment variable caps how
many workers are used (results do not depend on the cap).
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import PipelineConfig, parse_config
from .crf import CrfWeights, load_weights, save_weights
from .dataset import Movie, generate_movies, load_movie, save_movie
from .evaluation import auc, fold_assignments
from .forest import MODES, load_model, save_model
from .pipeline import (
    evaluate_cell_detection,
    evaluate_mitosis,
    event_records,
    movie_detections,
    train_detector,
    train_event_weights,
)

DETECTIONS_FORMAT = "hmd-detections-v1"
EVENTS_FORMAT = "hmd-events-v1"
PR_FORMAT = "hmd-pr-v1"
AUC_FORMAT = "hmd-auc-v1"
ABLATION_FORMAT = "hmd-ablation-v1"
PLOT_FORMAT = "hmd-pr-plot-v1"

EVAL_TARGETS = ("mother", "pair", "mitosis")
ABLATION_VARIANTS = (
    ("full", {}),
    ("mother+daughter", {"use_distance": False}),
    ("daughter+distance", {"use_mother": False}),
    ("mother+distance", {"use_daughter": False}),
)


def hmd_threads() -> int:
    """Worker cap from HMD_THREADS; defaults to the CPU count."""
    raw = os.environ.get("HMD_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"HMD_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ValueError(f"HMD_THREADS must be >= 1, got {cap}")
    return cap


def _thread_map(fn, items):
    """Ordered map over items on at most hmd_threads() workers."""
    items = list(items)
    workers = min(hmd_threads(), max(1, len(items)))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _subseed(master: int, index: int) -> int:
    """Stable derived seed so each stage draws an independent stream."""
    return int(np.random.SeedSequence([master, index]).generate_state(1, np.uint64)[0])


def _load_config(args) -> PipelineConfig:
    cfg = parse_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed < 2**64:
            raise ValueError("--seed must fit in an unsigned 64-bit integer")
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_movies(paths) -> list[Movie]:
    return [load_movie(p) for p in paths]


def _write_csv(path: Path, format_tag: str, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(f"# format: {format_tag}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def read_csv_rows(path):
    """(header, rows) of a version-tagged CSV written by this tool."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("# format: "):
        raise ValueError(f"{path}: missing format header")
    body = [ln for ln in lines[1:] if ln and not ln.startswith("#")]
    if not body:
        raise ValueError(f"{path}: no header row")
    return body[0], [ln.split(",") for ln in body[1:]]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    movies = generate_movies(cfg.movie_count, cfg.synth_config(), base_seed=cfg.seed)
    for movie in movies:
        save_movie(movie, out / movie.movie_id)
    events = sum(len(m.gt.events) for m in movies)
    print(f"wrote {len(movies)} movie(s), {events} event(s) under {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    movies = _load_movies(args.movies)
    params = cfg.train_params(mode=args.mode, seed=_subseed(cfg.seed, 0))
    model = train_detector(movies, params, sample_seed=_subseed(cfg.seed, 1))
    path = out / "model.hmd"
    save_model(model, path)
    print(f"trained {model.tree_count} trees ({args.mode}) on {len(movies)} movie(s) -> {path}")
    return 0


def cmd_detect(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    movie = load_movie(args.movie)
    settings = cfg.detection_settings()
    rows = []
    for f, per_class in enumerate(movie_detections(model, movie, settings)):
        for cls in sorted(per_class, key=int):
            for d in per_class[cls]:
                rows.append(
                    (f, cls.name.lower(), float(d.position[0]), float(d.position[1]),
                     repr(float(d.score)))
                )
    path = out / "detections.csv"
    _write_csv(path, DETECTIONS_FORMAT, "frame,class,x,y,score", rows)
    print(f"wrote {len(rows)} detection(s) -> {path}")
    return 0


def cmd_train_crf(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    movies = _load_movies(args.movies)
    weights = train_event_weights(model, movies, cfg.detection_settings(), l2=cfg.crf_l2)
    path = out / "weights.json"
    save_weights(weights, path)
    print(
        f"fitted event weights on {len(movies)} movie(s): "
        f"w_m={weights.w_m:.4f} w_d={weights.w_d:.4f} w_md={weights.w_md:.4f} "
        f"bias={weights.bias:.4f} -> {path}"
    )
    return 0


def cmd_detect_mitosis(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    weights = load_weights(args.weights)
    movie = load_movie(args.movie)
    dets = movie_detections(model, movie, cfg.detection_settings())
    records = sorted(event_records(dets, weights), key=lambda r: -r.score)
    rows = [
        (r.frame_t, float(r.mother[0]), float(r.mother[1]),
         float(r.daughter[0]), float(r.daughter[1]), repr(float(r.score)))
        for r in records
    ]
    path = out / "events.csv"
    _write_csv(path, EVENTS_FORMAT, "frameT,motherX,motherY,daughterX,daughterY,score", rows)
    print(f"wrote {len(rows)} ranked event(s) -> {path}")
    return 0


def _eval_fold(cfg: PipelineConfig, args, movies_by_id, fold_index, train_ids, test_ids):
    settings = cfg.detection_settings()
    train = [movies_by_id[m] for m in train_ids]
    test = [movies_by_id[m] for m in test_ids]
    params = cfg.train_params(mode=args.mode, seed=_subseed(cfg.seed, 2 * fold_index + 2))
    model = train_detector(train, params, sample_seed=_subseed(cfg.seed, 2 * fold_index + 3))
    if args.target == "mitosis":
        weights = train_event_weights(model, train, settings, l2=cfg.crf_l2)
        curve, auc_value = evaluate_mitosis(model, weights, test, settings)
    else:
        cell = evaluate_cell_detection(model, test, settings)
        curve = cell.mother_curve if args.target == "mother" else cell.pair_curve
        auc_value = cell.mother_auc if args.target == "mother" else cell.pair_auc
    return curve, auc_value


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    movies = _load_movies(args.movies)
    movies_by_id = {m.movie_id: m for m in movies}
    if len(movies_by_id) != len(movies):
        raise ValueError("movie ids must be unique across the evaluated set")
    folds = args.folds if args.folds is not None else cfg.folds
    assignments = fold_assignments(sorted(movies_by_id), folds, seed=cfg.seed)

    results = _thread_map(
        lambda item: _eval_fold(cfg, args, movies_by_id, item[0], *item[1]),
        list(enumerate(assignments)),
    )
    auc_rows = []
    for i, (curve, auc_value) in enumerate(results):
        _write_csv(out / f"pr_fold{i}.csv", PR_FORMAT, "threshold,recall,precision", curve)
        auc_rows.append((f"fold{i}", repr(float(auc_value))))
        print(f"fold {i}: auc {auc_value:.4f}")
    mean = float(np.mean([a for _, a in results]))
    auc_rows.append(("mean", repr(mean)))
    _write_csv(out / "auc.csv", AUC_FORMAT, "fold,auc", auc_rows)
    print(f"mean auc {mean:.4f} over {len(results)} fold(s) ({args.target}) -> {out}")
    return 0


def cmd_pr_plot(args) -> int:
    out = _out_dir(args)
    header, rows = read_csv_rows(args.curve)
    if header != "threshold,recall,precision":
        raise ValueError(f"{args.curve}: expected a threshold,recall,precision curve")
    points = [(float(r), float(p)) for _, r, p in rows]
    path = out / (Path(args.curve).stem + ".svg")
    _write_pr_svg(path, points)
    print(f"plotted {len(points)} point(s) -> {path}")
    return 0


def _write_pr_svg(path: Path, points) -> None:
    width, height = 480, 360
    ml, mr, mt, mb = 56, 16, 16, 44

    def sx(recall: float) -> float:
        return ml + recall * (width - ml - mr)

    def sy(precision: float) -> float:
        return height - mb - precision * (height - mt - mb)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f"<!-- format: {PLOT_FORMAT} -->",
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<path d="M {sx(0):.1f} {sy(0):.1f} H {sx(1):.1f} M {sx(0):.1f} {sy(0):.1f} '
        f'V {sy(1):.1f}" stroke="black" fill="none"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        x, y = sx(tick), sy(tick)
        parts.append(
            f'<path d="M {x:.1f} {sy(0):.1f} v 4 M {sx(0):.1f} {y:.1f} h -4" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{sy(0) + 18:.1f}" font-size="11" '
            f'text-anchor="middle">{tick:g}</text>'
        )
        parts.append(
            f'<text x="{sx(0) - 8:.1f}" y="{y + 4:.1f}" font-size="11" '
            f'text-anchor="end">{tick:g}</text>'
        )
    parts.append(
        f'<text x="{(sx(0) + sx(1)) / 2:.1f}" y="{height - 8}" font-size="12" '
        f'text-anchor="middle">recall</text>'
    )
    parts.append(
        f'<text x="14" y="{(sy(0) + sy(1)) / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {(sy(0) + sy(1)) / 2:.1f})">precision</text>'
    )
    if points:
        coords = " ".join(f"{sx(r):.2f},{sy(p):.2f}" for r, p in points)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="#c33" stroke-width="1.5"/>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    movies = _load_movies(args.movies)
    movies_by_id = {m.movie_id: m for m in movies}
    if len(movies_by_id) != len(movies):
        raise ValueError("movie ids must be unique across the ablated set")
    folds = args.folds if args.folds is not None else cfg.folds
    # one deterministic split: train on everything outside the first fold
    train_ids, test_ids = fold_assignments(sorted(movies_by_id), folds, seed=cfg.seed)[0]
    train = [movies_by_id[m] for m in train_ids]
    test = [movies_by_id[m] for m in test_ids]
    settings = cfg.detection_settings()
    params = cfg.train_params(mode=args.mode, seed=_subseed(cfg.seed, 0))
    model = train_detector(train, params, sample_seed=_subseed(cfg.seed, 1))

    rows = []
    for name, kwargs in ABLATION_VARIANTS:
        weights = train_event_weights(model, train, settings, l2=cfg.crf_l2, **kwargs)
        _, auc_value = evaluate_mitosis(model, weights, test, settings)
        rows.append((name, repr(float(auc_value))))
        print(f"{name:<18} auc {auc_value:.4f}")
    path = out / "ablation.csv"
    _write_csv(path, ABLATION_FORMAT, "model,auc", rows)
    print(f"wrote {len(rows)} model row(s) -> {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub, *, config=True, seed=True, out=True, mode=False, folds=False):
    if config:
        sub.add_argument("--config", help="JSON pipeline config", default=None)
    if seed:
        sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    if out:
        sub.add_argument("--out", required=True, help="output directory")
    if mode:
        sub.add_argument("--mode", choices=MODES, default="hf", help="forest variant")
    if folds:
        sub.add_argument(
            "--folds", type=_parse_folds, default=None,
            help="fold count or 'loo' (default: config value)",
        )


def _parse_folds(raw: str):
    if raw == "loo":
        return raw
    try:
        return int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"folds must be an integer or 'loo', got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmd",
        description="Hough-forest cell detection with CRF mitosis association.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic movies with ground truth")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a forest on movie directories")
    p.add_argument("movies", nargs="+", help="movie directories (frames + gt.json)")
    _add_common(p, mode=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("detect", help="write per-frame cell detections for one movie")
    p.add_argument("model", help="trained model file")
    p.add_argument("movie", help="movie directory")
    _add_common(p, seed=False)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("train-crf", help="fit event weights on movie directories")
    p.add_argument("model", help="trained model file")
    p.add_argument("movies", nargs="+", help="movie directories")
    _add_common(p, seed=False)
    p.set_defaults(fn=cmd_train_crf)

    p = sub.add_parser("detect-mitosis", help="write ranked division events for one movie")
    p.add_argument("model", help="trained model file")
    p.add_argument("weights", help="event weights file")
    p.add_argument("movie", help="movie directory")
    _add_common(p, seed=False)
    p.set_defaults(fn=cmd_detect_mitosis)

    p = sub.add_parser("eval", help="cross-validated PR curves and AUC")
    p.add_argument("movies", nargs="+", help="movie directories")
    p.add_argument("--target", choices=EVAL_TARGETS, default="mother",
                   help="what to score (default: mother)")
    _add_common(p, mode=True, folds=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pr-plot", help="render a PR CSV as SVG")
    p.add_argument("curve", help="threshold,recall,precision CSV")
    _add_common(p, config=False, seed=False)
    p.set_defaults(fn=cmd_pr_plot)

    p = sub.add_parser("ablate", help="full vs reduced event models on one split")
    p.add_argument("movies", nargs="+", help="movie directories")
    _add_common(p, mode=True, folds=True)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - batch tool: report and exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
