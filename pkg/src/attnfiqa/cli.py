"""Command-line interface: ``attnfiqa {score,ablate,heatmap,edc,group-stats}``.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .evaluation import DEFAULT_GRID, EmbeddingSet, auc, edc_curve, pauc, read_pairs, write_curve
from .heatmap import build_color_scale, overlay, patch_participation, render_heatmap
from .model_io import (ImageSizeError, load_config, load_weights, preprocess, read_id_list,
                       read_ppm, read_tensors, write_ppm)
from .scoring import (AVG_OF_HEADS, CONCAT, METRICS, DegenerateDispersionError, QualityScore,
                      format_score, group_statistics, head_strategy, normalize_scores,
                      parse_strategy, quality, read_scores, write_scores)
from .vit import forward_with_capture

log = logging.getLogger("attnfiqa")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class DataError(Exception):
    """Bad input data; reported on stderr with exit code 1."""


# -- helpers -------------------------------------------------------------------

def write_manifest(path, command, **fields):
    """Flat key=value run record written next to an output."""
    lines = [f"command={command}", f"version={__version__}"]
    for key, value in fields.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    lines.append(f"timestamp={datetime.now(timezone.utc).isoformat(timespec='seconds')}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def manifest_path(out):
    out = Path(out)
    return out.with_name(out.name + ".manifest")


def read_image_list(path):
    """Image paths, one per line; relative entries resolve against the list's folder."""
    base = Path(path).parent
    entries = read_id_list(path)
    return [(e, Path(e) if Path(e).is_absolute() else base / e) for e in entries]


def load_model(args):
    cfg = load_config(args.config)
    ws = load_weights(args.weights, cfg)
    block = cfg.num_blocks if args.block is None else args.block
    if not 1 <= block <= cfg.num_blocks:
        raise DataError(f"--block must be in [1, {cfg.num_blocks}] for this config")
    return cfg, ws, block


def capture_images(images, cfg, ws, block, workers):
    """Load and run every image; returns ``[(name, raster, capture | None, error | None)]``."""

    def run(item):
        name, path = item
        try:
            raster = read_ppm(path)
            if raster.shape[:2] != (cfg.image_height, cfg.image_width):
                raise ImageSizeError(f"image is {raster.shape[1]}x{raster.shape[0]}, "
                                     f"model expects {cfg.image_width}x{cfg.image_height}")
            _, cap = forward_with_capture(preprocess(raster, cfg), ws, cfg, block)
            log.debug("captured block %d for %s", block, name)
            return name, raster, cap, None
        except (OSError, ValueError) as exc:
            return name, None, None, exc

    if workers <= 1 or len(images) < 2:
        return [run(i) for i in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, images))


def report_failures(results):
    failed = [(name, err) for name, _, _, err in results if err is not None]
    for name, err in failed:
        print(f"error: {name}: {err}", file=sys.stderr)
    return failed


# -- commands ------------------------------------------------------------------

def cmd_score(args):
    cfg, ws, block = load_model(args)
    parse_strategy(args.strategy, cfg.num_heads)
    images = read_image_list(args.images)
    results = capture_images(images, cfg, ws, block, args.workers)
    failed = report_failures(results)
    rows = [(name, quality(cap, args.strategy, args.metric))
            for name, _, cap, err in results if err is None]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        write_scores(fh, rows)
    write_manifest(manifest_path(args.out), "score", config=args.config, weights=args.weights,
                   images=args.images, output=args.out, strategy=args.strategy,
                   metric=args.metric, block=block, scored=len(rows), failed=len(failed))
    return EXIT_DATA if failed else EXIT_OK


def ablation_rows(name, cap):
    """Every strategy x metric score for one capture."""
    strategies = [CONCAT] + [head_strategy(h) for h in range(1, cap.num_heads + 1)] + [AVG_OF_HEADS]
    rows = []
    for strategy in strategies:
        for metric in METRICS:
            try:
                rows.append((name, quality(cap, strategy, metric), ""))
            except DegenerateDispersionError:
                rows.append((name, QualityScore(float("nan"), strategy, metric, cap.block_index),
                             "degenerate_dispersion"))
    return rows


def cmd_ablate(args):
    cfg, ws, block = load_model(args)
    images = read_image_list(args.images)
    results = capture_images(images, cfg, ws, block, args.workers)
    failed = report_failures(results)
    rows = []
    for name, _, cap, err in results:
        if err is None:
            rows.extend(ablation_rows(name, cap))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        write_scores(fh, rows, extra_columns=("flag",))
    write_manifest(manifest_path(args.out), "ablate", config=args.config, weights=args.weights,
                   images=args.images, output=args.out, block=block,
                   strategies="concat,head_1..head_%d,avg_of_heads" % cfg.num_heads,
                   metrics=METRICS, failed=len(failed))
    return EXIT_DATA if failed else EXIT_OK


def cmd_heatmap(args):
    cfg, ws, block = load_model(args)
    images = read_image_list(args.images)
    results = capture_images(images, cfg, ws, block, args.workers)
    failed = report_failures(results)
    ok = [(name, raster, cap) for name, raster, cap, err in results if err is None]
    if not ok:
        return EXIT_DATA if failed else EXIT_OK
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = [patch_participation(cap, cfg.grid_height, cfg.grid_width) for _, _, cap in ok]
    scale = build_color_scale(maps)
    raw = [quality(cap, CONCAT, "mean").value for _, _, cap in ok]
    normalized = normalize_scores(raw)
    outputs = []
    for i, ((name, raster, _), pmap) in enumerate(zip(ok, maps)):
        stem = f"{i:04d}_{Path(name).stem}"
        heat = render_heatmap(pmap, scale, cfg.patch_size)
        write_ppm(out_dir / f"{stem}_heatmap.ppm", heat)
        write_ppm(out_dir / f"{stem}_overlay.ppm", overlay(raster, heat, args.alpha))
        outputs.append(stem)
    with open(out_dir / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "raw_score", "normalized_score", "heatmap", "overlay"])
        for (name, _, _), s, n, stem in zip(ok, raw, normalized, outputs):
            w.writerow([name, format_score(s), format_score(n),
                        f"{stem}_heatmap.ppm", f"{stem}_overlay.ppm"])
    write_manifest(out_dir / "run.manifest", "heatmap", config=args.config,
                   weights=args.weights, images=args.images, output=out_dir, block=block,
                   alpha=args.alpha, scale_min=repr(scale.global_min),
                   scale_max=repr(scale.global_max), failed=len(failed))
    return EXIT_DATA if failed else EXIT_OK


def load_embeddings(tensor_path, ids_path):
    tensors = read_tensors(tensor_path)
    if "embeddings" not in tensors:
        raise DataError(f"{tensor_path}: no tensor named 'embeddings'")
    vectors = tensors["embeddings"]
    ids = read_id_list(ids_path)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise DataError(f"{len(ids)} ids for embeddings of shape {vectors.shape}")
    return EmbeddingSet(ids, vectors)


def cmd_edc(args):
    emb = load_embeddings(args.embeddings, args.ids)
    pairs = read_pairs(args.pairs)
    qualities = read_scores(args.qualities, key=args.key)
    for p in pairs:
        for sid in (p.id_a, p.id_b):
            if sid not in emb:
                raise DataError(f"pairs reference unknown id {sid!r}")
            if sid not in qualities:
                raise DataError(f"no quality score for id {sid!r}")
    curve = edc_curve(emb, pairs, qualities, args.target_fmr, args.grid)
    write_curve(args.out, curve)
    summary = {
        "threshold": repr(curve.threshold),
        "target_fmr": repr(curve.target_fmr),
        "fnmr_at_0": repr(float(curve.fnmr[0])),
        "auc": repr(auc(curve)),
        f"pauc_{args.max_discard:g}": repr(pauc(curve, args.max_discard)),
        "auc_x1e3": repr(auc(curve) * 1e3),
        f"pauc_{args.max_discard:g}_x1e3": repr(pauc(curve, args.max_discard) * 1e3),
    }
    text = "".join(f"{k}={v}\n" for k, v in summary.items())
    Path(args.out).with_name(Path(args.out).name + ".summary").write_text(text, encoding="utf-8")
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    write_manifest(manifest_path(args.out), "edc", embeddings=args.embeddings, ids=args.ids,
                   pairs=args.pairs, qualities=args.qualities, output=args.out,
                   target_fmr=repr(args.target_fmr), grid_points=len(args.grid),
                   max_discard=args.max_discard, key=args.key)
    return EXIT_OK


def read_labels(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns path,label")
        return {row["path"]: row["label"] for row in reader}


def cmd_group_stats(args):
    scores = read_scores(args.scores)
    labels = read_labels(args.labels)
    unmatched = sorted(set(scores) ^ set(labels))
    if unmatched:
        for key in unmatched:
            side = "scores" if key in scores else "labels"
            print(f"error: {key!r} appears only in {side}", file=sys.stderr)
        return EXIT_DATA
    keys = sorted(scores)
    summary = group_statistics([scores[k] for k in keys], [labels[k] for k in keys])
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "count", "mean", "median", "q1", "q3", "min", "max"])
        for g in summary:
            w.writerow([g.group, g.count] + [repr(x) for x in
                        (g.mean, g.median, g.q1, g.q3, g.min, g.max)])
    write_manifest(manifest_path(args.out), "group-stats", scores=args.scores,
                   labels=args.labels, output=args.out, groups=len(summary))
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def _unit_interval(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return value


def _open_fraction(text):
    value = _unit_interval(text)
    if value in (0.0, 1.0):
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return value


def _strategy(text):
    try:
        parse_strategy(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _grid(text):
    """Comma-separated fractions, or ``start:stop:step`` (stop inclusive)."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            count = int(round((stop - start) / step)) + 1
            values = [round(start + i * step, 12) for i in range(count)]
        else:
            values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None
    if not values or values[0] != 0.0 or any(b <= a for a, b in zip(values, values[1:])) \
            or values[-1] > 1.0:
        raise argparse.ArgumentTypeError("grid must start at 0 and increase strictly within [0, 1]")
    return values


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser():
    parser = argparse.ArgumentParser(
        prog="attnfiqa", description="Face image quality from pre-softmax ViT attention.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_args(p):
        p.add_argument("--config", required=True, help="key=value model config")
        p.add_argument("--weights", required=True, help="AFQW weight container")
        p.add_argument("--images", required=True, help="text file, one PPM path per line")
        p.add_argument("--block", type=_positive_int, default=None,
                       help="1-based capture block (default: last)")
        p.add_argument("--workers", type=_positive_int, default=1)

    p = sub.add_parser("score", help="score images")
    model_args(p)
    p.add_argument("--strategy", type=_strategy, default=CONCAT,
                   help="concat, avg_of_heads or head_<h>")
    p.add_argument("--metric", choices=METRICS, default="mean")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ablate", help="every head strategy x aggregation metric")
    model_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("heatmap", help="render attention heatmaps and overlays")
    model_args(p)
    p.add_argument("--alpha", type=_unit_interval, default=0.5)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("edc", help="error-versus-discard curve, AUC and pAUC")
    p.add_argument("--embeddings", required=True, help="AFQW file with an 'embeddings' tensor")
    p.add_argument("--ids", required=True, help="sample ids, one per line, in tensor row order")
    p.add_argument("--pairs", required=True, help="CSV id_a,id_b,label")
    p.add_argument("--qualities", required=True, help="score CSV from 'attnfiqa score'")
    p.add_argument("--key", choices=("path", "stem"), default="path",
                   help="match sample ids to the score CSV path column or its file stem")
    p.add_argument("--target-fmr", type=_open_fraction, default=1e-3)
    p.add_argument("--grid", type=_grid, default=list(DEFAULT_GRID))
    p.add_argument("--max-discard", type=_unit_interval, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edc)

    p = sub.add_parser("group-stats", help="per-group score distribution summary")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True, help="CSV path,label")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_group_stats)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
