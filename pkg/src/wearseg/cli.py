"""Command-line orchestration: prepare tiles, train, run grids, predict,
evaluate, and report.

Commands

    synth     generate a synthetic corpus to disk
    prepare   cut all training tile sets (2 edges x 3 levels) + test sets
    train     train one configuration (90/10 final-model protocol)
    grid      run the experiment grid with 5-fold cross validation
    predict   stitched full-image prediction + overlay figure
    evaluate  score a checkpoint on a tile set
    report    tables, boxplots and best-config summary from run artifacts

Exit codes: 0 on success, 1 on validation/runtime errors (the message names
the offending input), 2 on bad command lines.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import augment, corpus, metrics, reporting, tiling, training, unet

DESK_SCALE_EDGE = 256
DESK_SCALE_FILTERS = 16
DESK_SCALE_EPOCHS = 50


def _load_config_file(path: str) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    allowed = {"mode", "tile_edge", "aug_level", "loss_kind", "use_batch_norm",
               "batch_size", "seed", "base_filters"}
    bad = set(data) - allowed
    if bad:
        raise ValueError(f"unknown config keys in {path}: {sorted(bad)}")
    return data


def _experiment_config(args) -> training.ExperimentConfig:
    values = _load_config_file(args.config) if args.config else {}
    overrides = {"mode": args.mode, "tile_edge": args.tile_edge,
                 "aug_level": args.aug, "loss_kind": args.loss,
                 "use_batch_norm": args.bn, "batch_size": args.batch_size,
                 "seed": args.seed, "base_filters": args.base_filters}
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    if args.desk_scale:
        values.setdefault("tile_edge", DESK_SCALE_EDGE)
        values["base_filters"] = DESK_SCALE_FILTERS
    missing = [k for k in ("mode", "tile_edge", "aug_level", "loss_kind") if k not in values]
    if missing:
        raise ValueError(f"missing configuration fields: {missing} "
                         "(pass flags or --config)")
    values.setdefault("use_batch_norm", False)
    values.setdefault("seed", 0)
    return training.ExperimentConfig(**values)


def _settings(args) -> training.TrainerSettings:
    kwargs = {}
    if getattr(args, "max_epochs", None) is not None:
        kwargs["max_epochs"] = args.max_epochs
    elif args.desk_scale:
        kwargs["max_epochs"] = DESK_SCALE_EPOCHS
    return training.TrainerSettings(**kwargs)


def _train_set_dir(tiles_root: Path, edge: int, level: str) -> Path:
    return tiles_root / f"train_d{edge}_{level}"


def _test_set_dir(tiles_root: Path, edge: int) -> Path:
    return tiles_root / f"test_d{edge}"


def cmd_synth(args) -> int:
    images = corpus.generate_synthetic_corpus(args.n, args.height, args.width,
                                              args.seed)
    manifest = corpus.write_corpus(images, args.out)
    print(f"wrote {args.n} synthetic images, manifest {manifest}")
    return 0


def cmd_prepare(args) -> int:
    tiles_root = Path(args.out) / "tiles"
    counts_path = tiles_root / "counts.json"
    if counts_path.exists() and not args.force:
        print(f"tile sets up to date under {tiles_root} (use --force to rebuild)")
        return 0
    records = corpus.read_manifest(args.corpus)
    root = Path(args.corpus).parent
    ids = [r["id"] for r in records]
    split = corpus.split_corpus(ids, n_test=args.n_test, seed=args.seed)
    by_id = {r["id"]: r for r in records}
    edges = [args.tile_edge] if args.tile_edge else \
        ([DESK_SCALE_EDGE] if args.desk_scale else [512, 256])
    levels = [args.aug] if args.aug else list(augment.LEVELS)

    counts = {"split": {"train": split.train, "test": split.test}, "sets": {}}

    def load(image_id: str) -> corpus.AnnotatedImage:
        rec = by_id[image_id]
        im = corpus.load_annotated_image(root / rec["image_path"],
                                         root / rec["mask_path"],
                                         pixel_scale=rec.get("pixel_scale", 1.0))
        im.id = image_id
        return im

    for edge in edges:
        for level in levels:
            geom = augment.geometry_for_level(edge, level)
            out_dir = _train_set_dir(tiles_root, edge, level)
            with tiling.TileSetWriter(out_dir) as writer:
                for image_id in split.train:
                    for tile in augment.build_training_set([load(image_id)], geom,
                                                           level, args.seed):
                        writer.add(tile)
            counts["sets"][f"train_d{edge}_{level}"] = writer.count
            print(f"train_d{edge}_{level}: {writer.count} tiles")
        with tiling.TileSetWriter(_test_set_dir(tiles_root, edge)) as writer:
            for image_id in split.test:
                for tile in tiling.cut_tiles(load(image_id),
                                             tiling.TileGeometry(edge, edge)):
                    writer.add(tile)
        counts["sets"][f"test_d{edge}"] = writer.count
        print(f"test_d{edge}: {writer.count} tiles")

    with open(counts_path, "w") as fh:
        json.dump(counts, fh, indent=2, sort_keys=True)
    print(f"counts summary written to {counts_path}")
    return 0


def cmd_train(args) -> int:
    config = _experiment_config(args)
    settings = _settings(args)
    tiles_root = Path(args.tiles)
    train_tiles = tiling.load_tiles(
        _train_set_dir(tiles_root, config.tile_edge, config.aug_level))
    test_tiles = tiling.load_tiles(_test_set_dir(tiles_root, config.tile_edge))
    result = training.train_final(config, train_tiles, settings=settings)
    if result.report is None and test_tiles:
        result.report = metrics.evaluate_testset(
            unet.make_predictor(result.model), test_tiles, config.mode)

    out_dir = Path(args.out) / "runs" / f"{config.config_hash()}-final"
    out_dir.mkdir(parents=True, exist_ok=True)
    unet.save_checkpoint(result.model, out_dir / "checkpoint.pt")
    reporting.write_history_csv(out_dir / "history.csv", result.fit.history)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(asdict(config), fh, indent=2, sort_keys=True)
    if result.report is not None:
        reporting.write_report_csv(out_dir / "report.csv", result.report)
        print(f"{config.label()}: test IoU {result.report.iou:.3f}, "
              f"Dice {result.report.dice:.3f}")
    status = "failed (best val loss above threshold)" if result.failed else "ok"
    print(f"training {status}; best val loss {result.fit.best_val_loss:.4f} "
          f"at epoch {result.fit.best_epoch}; artifacts in {out_dir}")
    return 1 if result.failed else 0


def cmd_grid(args) -> int:
    settings = _settings(args)
    base_filters = DESK_SCALE_FILTERS if args.desk_scale else \
        (args.base_filters or 64)
    configs = training.grid_configs(seed=args.seed, base_filters=base_filters)
    if args.desk_scale:
        configs = [c for c in configs if c.tile_edge == DESK_SCALE_EDGE]
    for attr, flag in (("mode", args.mode), ("aug_level", args.aug),
                       ("loss_kind", args.loss)):
        if flag is not None:
            configs = [c for c in configs if getattr(c, attr) == flag]
    if args.tile_edge is not None:
        configs = [c for c in configs if c.tile_edge == args.tile_edge]
    if args.bn is not None:
        configs = [c for c in configs if c.use_batch_norm == args.bn]
    if not configs:
        raise ValueError("grid selection matched no configurations")

    tiles_root = Path(args.tiles)
    train_tilesets, test_tilesets = {}, {}
    for c in configs:
        key = (c.tile_edge, c.aug_level)
        if key not in train_tilesets:
            train_tilesets[key] = tiling.load_tiles(
                _train_set_dir(tiles_root, *key))
        if c.tile_edge not in test_tilesets:
            test_tilesets[c.tile_edge] = tiling.load_tiles(
                _test_set_dir(tiles_root, c.tile_edge))

    rows = training.run_grid(configs, train_tilesets, test_tilesets, args.out,
                             settings=settings, resume=not args.force)
    failed = [r for r in rows if r["status"] == "failed"]
    print(f"grid complete: {len(rows)} cells, {len(failed)} failed; "
          f"summary {Path(args.out) / 'grid_summary.csv'}")
    return 1 if failed else 0


def cmd_predict(args) -> int:
    model = unet.load_checkpoint(args.checkpoint)
    records = {r["id"]: r for r in corpus.read_manifest(args.corpus)}
    if args.image_id not in records:
        raise ValueError(f"image id {args.image_id!r} not in corpus "
                         f"{args.corpus} (known: {sorted(records)[:8]} ...)")
    rec = records[args.image_id]
    root = Path(args.corpus).parent
    image = corpus.load_annotated_image(root / rec["image_path"],
                                        root / rec["mask_path"])
    image.id = args.image_id
    edge = model.config.input_edge
    geom = tiling.TileGeometry(edge, edge // 2)
    probs = tiling.stitch_predict(image, unet.make_predictor(model), geom)
    classes = unet.predict_classes(probs, model.config.mode)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    from PIL import Image as PILImage
    PILImage.fromarray(classes.astype(np.uint8), mode="L").save(
        out_dir / f"{args.image_id}_pred.png")
    reporting.overlay_figure(image.pixels, classes, model.config.mode,
                             out_dir / f"{args.image_id}_overlay.png",
                             truth_mask=image.mask)
    pred_bin = (classes > 0).astype(np.uint8)
    true_bin = corpus.collapse_to_binary(image.mask)
    iou = metrics.scores(metrics.confusion(true_bin, pred_bin))[0]
    print(f"{args.image_id}: full-image IoU (wear as one joint class) = {iou:.3f}")
    print(f"wrote {out_dir / (args.image_id + '_pred.png')} and overlay")
    return 0


def cmd_evaluate(args) -> int:
    model = unet.load_checkpoint(args.checkpoint)
    tiles = tiling.load_tiles(args.tiles)
    report = metrics.evaluate_testset(unet.make_predictor(model), tiles,
                                      model.config.mode)
    for name in metrics.METRIC_NAMES:
        print(f"{reporting.TABLE_HEADERS[name]:>8}: {getattr(report, name):.3f}")
    if args.out:
        reporting.write_report_csv(args.out, report)
        print(f"report written to {args.out}")
    return 0


def cmd_report(args) -> int:
    runs_dir = Path(args.run) / "runs"
    if not runs_dir.is_dir():
        raise ValueError(f"no runs directory under {args.run}")
    rows = []
    for summary in sorted(runs_dir.glob("*/summary.json")):
        with open(summary) as fh:
            rows.append(json.load(fh))
    if not rows:
        raise ValueError(f"no completed grid cells under {runs_dir}")
    out_dir = Path(args.out) if args.out else Path(args.run) / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    reporting.write_grid_summary_csv(out_dir / "grid_summary.csv", rows)
    for edge in sorted({r["tile_edge"] for r in rows}, reverse=True):
        table = reporting.format_scores_table(rows, edge)
        path = out_dir / f"scores_d{edge}.txt"
        path.write_text(table)
        print(f"wrote {path}")
    reporting.boxplot_panels(rows, out_dir / "boxplots.png")
    print(f"wrote {out_dir / 'boxplots.png'}")
    best = reporting.best_config_rows(rows)
    lines = ["best configurations (highest median IoU, ties by Dice):"]
    for row in best:
        lines.append(f"  {row['mode']} d={row['tile_edge']}: {row['label']} "
                     f"IoU {row['iou_median']:.3f} ({row['iou_iqr']:.3f})")
    text = "\n".join(lines)
    (out_dir / "best_configs.txt").write_text(text + "\n")
    print(text)
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["binary", "multiclass"])
    p.add_argument("--tile-edge", type=int, choices=[256, 512], dest="tile_edge")
    p.add_argument("--aug", choices=list(augment.LEVELS))
    p.add_argument("--loss", choices=["ce", "fce", "iou"])
    bn = p.add_mutually_exclusive_group()
    bn.add_argument("--bn", dest="bn", action="store_true", default=None)
    bn.add_argument("--no-bn", dest="bn", action="store_false")
    p.add_argument("--desk-scale", action="store_true",
                   help="small-budget defaults: d=256, base_filters=16")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wearseg", description="tool-wear segmentation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=24)
    p.add_argument("--height", type=int, default=1200)
    p.add_argument("--width", type=int, default=4700)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="cut training and test tile sets")
    p.add_argument("--corpus", required=True, help="corpus manifest (jsonl)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-test", type=int, default=4, dest="n_test")
    p.add_argument("--tile-edge", type=int, choices=[256, 512], dest="tile_edge")
    p.add_argument("--aug", choices=list(augment.LEVELS))
    p.add_argument("--desk-scale", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--tiles", required=True, help="prepared tiles root")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with ExperimentConfig fields")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--base-filters", type=int, default=None, dest="base_filters")
    p.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="run the experiment grid")
    p.add_argument("--tiles", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-filters", type=int, default=None, dest="base_filters")
    p.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    p.add_argument("--force", action="store_true",
                   help="recompute cells even when summaries exist")
    p.add_argument("--resume", action="store_true",
                   help="(default) skip completed cells")
    _add_config_flags(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("predict", help="stitched full-image prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--image-id", required=True, dest="image_id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a checkpoint on a tile set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tiles", required=True, help="tile set directory")
    p.add_argument("--out", default=None, help="optional report CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="tables and figures from run artifacts")
    p.add_argument("--run", required=True, help="grid output directory")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
