"""Command-line entry point: ``debrisseg <subcommand> --config pipeline.yaml``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import resource
import shutil
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .annotation import (
    DatasetManifest,
    DatasetRecord,
    aggregate_consensus,
    class_balance_report,
    classify_positive,
    consensus_filename,
    find_annotations,
    load_annotation_stack,
    read_mask,
    split_by_event,
    write_mask,
)
from .config import PipelineConfig
from .errors import (
    ConfigurationError,
    DebrisSegError,
    EmptyInputError,
    IncompleteError,
    ShapeError,
)
from .evalsuite import evaluate_test_set
from .geotile import (
    GeoRaster,
    TileRef,
    extract_tile,
    load_raster,
    merge_mosaic,
    plan_tiles,
    read_rgb,
    resize_for_model,
    resize_labels,
    save_mosaic,
    write_label_png,
    write_rgb,
)
from .promptcraft import build_pools, load_pools, save_pools
from .segmodel import (
    DecoderConfig,
    build_decoder,
    load_checkpoint,
    make_backend,
    segment_multiclass,
    text_conditions,
)
from .trainer import EncodingCache, TrainConfig, TrainingSet, evaluate_dice, select_checkpoint, train

log = logging.getLogger("debrisseg")

RASTER_SUFFIXES = {".tif", ".tiff", ".png", ".jpg", ".jpeg"}
MANIFEST_NAME = "manifest.json"
BEST_MARKER = "best.json"


class OverwriteRefused(DebrisSegError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _ensure_fresh(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise OverwriteRefused(f"{path} already has outputs; pass --overwrite to replace them")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_dir(cfg: PipelineConfig, key: str) -> Path:
    value = getattr(cfg.paths, key)
    if value is None:
        raise ConfigurationError(f"paths.{key} is not set")
    path = cfg.resolve(value)
    if not path.is_dir():
        raise ConfigurationError(f"paths.{key} does not exist: {path}")
    return path


def _manifest(cfg: PipelineConfig) -> DatasetManifest:
    path = cfg.output_root / MANIFEST_NAME
    if not path.is_file():
        raise ConfigurationError(f"no dataset manifest at {path}; run 'aggregate' first")
    return DatasetManifest.load(path)


def _map(cfg: PipelineConfig, fn, items):
    if cfg.runtime.worker_count <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cfg.runtime.worker_count) as pool:
        return list(pool.map(fn, items))


def _backend(cfg: PipelineConfig):
    return make_backend(cfg.model.backend, **cfg.model.backend_options)


def _new_decoder(cfg: PipelineConfig, backend):
    opts = dict(cfg.model.decoder)
    opts.setdefault("encoder_dim", backend.hidden_dim)
    opts.setdefault("layers", backend.layers)
    decoder = build_decoder(DecoderConfig(**opts), seed=cfg.runtime.seed)
    init = cfg.model.init
    if init == "published":
        decoder.load_published(backend.published_decoder_state())
    elif init != "random":
        decoder, _ = load_checkpoint(cfg.resolve(init))
    return decoder


def _inference_decoder(cfg: PipelineConfig):
    if cfg.model.checkpoint:
        path = cfg.resolve(cfg.model.checkpoint)
    else:
        marker = cfg.out("checkpoints") / BEST_MARKER
        if not marker.is_file():
            raise ConfigurationError("no model.checkpoint configured and no trained best checkpoint found")
        path = Path(json.loads(marker.read_text())["checkpoint_path"])
    decoder, _ = load_checkpoint(path)
    decoder.eval()
    return decoder, path


# ---------------------------------------------------------------------------
# commands; each returns (summary dict, input files)


def cmd_tile(cfg: PipelineConfig, overwrite: bool = False):
    raster_dir = _require_dir(cfg, "raster_dir")
    rasters = sorted(p for p in raster_dir.rglob("*") if p.is_file() and p.suffix.lower() in RASTER_SUFFIXES)
    if not rasters:
        raise EmptyInputError(f"no rasters found in {raster_dir}")
    tiles_dir = _ensure_fresh(cfg.out("tiles"), overwrite)
    index = {"schema_version": 1, "ground_size_m": cfg.tiling.ground_size_m, "rasters": []}
    failures = {}
    for path in rasters:
        stem = path.relative_to(raster_dir).with_suffix("").as_posix().replace("/", "-").replace("__", "_")
        try:
            raster = load_raster(path)
            tiles = plan_tiles(raster, cfg.tiling.ground_size_m)

            def write(tile, raster=raster, stem=stem):
                out = tiles_dir / stem / f"{stem}_{tile.tile_id}.png"
                write_rgb(out, extract_tile(raster, tile))
                return {**tile.to_dict(), "image_id": out.stem, "image_path": str(out)}

            entries = _map(cfg, write, tiles)
        except (DebrisSegError, OSError) as exc:
            log.error("tiling %s failed: %s", path, exc)
            failures[str(path)] = str(exc)
            continue
        index["rasters"].append(
            {
                "raster": str(path),
                "stem": stem,
                "gsd_m": raster.gsd_m,
                "crs_id": raster.crs_id,
                "shape": [raster.height_px, raster.width_px],
                "geotransform": list(raster.geotransform),
                "tiles": entries,
            }
        )
    (tiles_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    n_tiles = sum(len(r["tiles"]) for r in index["rasters"])
    if failures:
        (tiles_dir / "INCOMPLETE.json").write_text(json.dumps(failures, indent=2) + "\n")
        raise IncompleteError(f"{len(failures)} raster(s) failed to tile", failures)
    return {"rasters": len(rasters), "tiles": n_tiles, "index": str(tiles_dir / "index.json")}, rasters


def _read_records(cfg: PipelineConfig) -> list[dict]:
    if cfg.paths.records is None:
        raise ConfigurationError("paths.records is not set")
    path = cfg.resolve(cfg.paths.records)
    if not path.is_file():
        raise ConfigurationError(f"records file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for col in ("image_id", "event"):
        if rows and col not in rows[0]:
            raise ConfigurationError(f"records file {path} lacks a {col!r} column")
    image_dir = cfg.resolve(cfg.paths.image_dir) if cfg.paths.image_dir else None
    for row in rows:
        if "__" in row["image_id"]:
            raise ConfigurationError(f"image id {row['image_id']!r} must not contain '__'")
        raw = (row.get("image_path") or "").strip()
        if raw:
            p = Path(raw)
            row["image_path"] = str(p if p.is_absolute() else path.parent / p)
        elif image_dir is not None:
            row["image_path"] = str(image_dir / f"{row['image_id']}.png")
        else:
            raise ConfigurationError(f"no image_path for {row['image_id']} and paths.image_dir unset")
    return rows


def cmd_aggregate(cfg: PipelineConfig, overwrite: bool = False):
    ann_dir = _require_dir(cfg, "annotation_dir")
    rows = _read_records(cfg)
    masks_dir = _ensure_fresh(cfg.out("masks"), overwrite)
    records, skipped, inputs = [], [], [cfg.resolve(cfg.paths.records)]

    def aggregate_one(row):
        anns = find_annotations(ann_dir, row["image_id"])
        if not anns:
            return None
        stack = load_annotation_stack(anns)
        with Image.open(row["image_path"]) as img:
            w, h = img.size
        if stack.stack.shape[:2] != (h, w):
            raise ShapeError(f"{row['image_id']}: masks {stack.stack.shape[:2]} vs image {(h, w)}")
        consensus = aggregate_consensus(stack)
        out = write_mask(masks_dir / consensus_filename(row["image_id"]), consensus)
        return DatasetRecord(
            image_id=row["image_id"],
            event=row["event"],
            region=row.get("region", "") or "",
            image_path=row["image_path"],
            is_positive=classify_positive(consensus),
            annotation_paths=[str(anns[a]) for a in sorted(anns)],
            consensus_path=str(out),
        )

    for row, rec in zip(rows, _map(cfg, aggregate_one, rows)):
        if rec is None:
            log.error("no annotations for %s; skipped", row["image_id"])
            skipped.append(row["image_id"])
        else:
            records.append(rec)
            inputs.extend(Path(p) for p in rec.annotation_paths)

    manifest = split_by_event(
        records, cfg.evaluation.held_out_event, cfg.evaluation.val_fraction, cfg.runtime.seed
    )
    manifest.save(cfg.output_root / MANIFEST_NAME)
    balance = class_balance_report(manifest)
    (masks_dir / "class_balance.json").write_text(json.dumps(balance, indent=2) + "\n")
    if skipped:
        (masks_dir / "INCOMPLETE.json").write_text(json.dumps({"no_annotations": skipped}, indent=2) + "\n")
        raise IncompleteError("images with zero annotations were skipped", skipped)
    return {"records": len(records), "class_balance": balance}, inputs


def cmd_engineer(cfg: PipelineConfig, overwrite: bool = False):
    manifest = _manifest(cfg)
    pools = build_pools(
        manifest, cfg.promptcraft.brightness_factor, cfg.promptcraft.blur_sigma_px, cfg.tiling.target_px
    )
    prompts_dir = _ensure_fresh(cfg.out("prompts"), overwrite)
    index = save_pools(pools, prompts_dir)
    sizes = {f"P{lvl}": len(pools.pools[lvl]) for lvl in (0, 1, 2)}
    return {"pool_sizes": sizes, "index": str(index)}, [cfg.output_root / MANIFEST_NAME]


def cmd_train(cfg: PipelineConfig, overwrite: bool = False, resume: bool = False):
    manifest = _manifest(cfg)
    prompts_index = cfg.out("prompts") / "index.json"
    if not prompts_index.is_file():
        raise ConfigurationError("no prompt pools found; run 'engineer' first")
    pools = load_pools(cfg.out("prompts"))
    data = TrainingSet.from_manifest(manifest, cfg.tiling.target_px)
    backend = _backend(cfg)
    decoder = _new_decoder(cfg, backend)
    ckpt_dir = cfg.out("checkpoints")
    if resume:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    else:
        _ensure_fresh(ckpt_dir, overwrite)
    tr = cfg.training
    tconf = TrainConfig(
        batch_size=tr.batch_size,
        epochs=tr.epochs,
        lr_start=tr.lr_start,
        lr_end=tr.lr_end,
        weight_decay=tr.weight_decay,
        seed=cfg.runtime.seed,
        mixed_precision=tr.mixed_precision,
        deterministic=cfg.runtime.deterministic_mode,
        level_weights=tuple(tr.level_weights),
        checkpoint_every=tr.checkpoint_every,
        device=tr.device,
    )
    digest_before = backend.weights_digest()
    records = train(
        tconf, data, pools, backend, decoder, ckpt_dir, ckpt_dir / "train_log.jsonl", resume=resume
    )
    summary = {"epochs": len(records), "encoder_digest": digest_before}
    if records:
        best = select_checkpoint(records)
        (ckpt_dir / BEST_MARKER).write_text(
            json.dumps(
                {"epoch": best.epoch, "val_debris_dice": best.val_debris_dice, "checkpoint_path": best.checkpoint_path},
                indent=2,
            )
            + "\n"
        )
        (ckpt_dir / "records.json").write_text(
            json.dumps([r.__dict__ for r in records], indent=2) + "\n"
        )
        cache = EncodingCache(backend, data.images, pools)
        summary.update(
            best_epoch=best.epoch,
            best_val_debris_dice=best.val_debris_dice,
            best_checkpoint=best.checkpoint_path,
            final_train_debris_dice=evaluate_dice(decoder, cache, data.train_ids, data.consensus),
        )
    summary["encoder_digest_unchanged"] = backend.weights_digest() == digest_before
    return summary, [cfg.output_root / MANIFEST_NAME, prompts_index]


def _predict_raster(cfg, raster: GeoRaster, tiles, backend, decoder, conds, tiles_dir: Path):
    out = []
    for tile in tiles:
        query = resize_for_model(extract_tile(raster, tile), cfg.tiling.target_px)
        labels = segment_multiclass(query, conds, backend, decoder)
        labels = resize_labels(labels, tile.pixel_window[2:])
        write_label_png(tiles_dir / f"{tile.tile_id}.png", labels)
        out.append((tile, labels))
    return out


def cmd_infer(cfg: PipelineConfig, raster_path, overwrite: bool = False):
    raster_path = Path(raster_path)
    raster = load_raster(raster_path)
    tiles = plan_tiles(raster, cfg.tiling.ground_size_m)
    mosaics = cfg.out("mosaics")
    stem = raster_path.stem
    target = mosaics / f"{stem}.png"
    if target.exists() and not overwrite:
        raise OverwriteRefused(f"{target} exists; pass --overwrite to replace it")
    backend = _backend(cfg)
    decoder, ckpt = _inference_decoder(cfg)
    tiles_dir = _ensure_fresh(mosaics / f"{stem}_tiles", overwrite)
    conds = text_conditions(backend, cfg.output_root / "cache" / "text_embeddings.json")

    t0 = time.perf_counter()
    predictions = _predict_raster(cfg, raster, tiles, backend, decoder, conds, tiles_dir)
    elapsed = time.perf_counter() - t0
    (tiles_dir / "index.json").write_text(
        json.dumps(
            {
                "schema_version": 1,
                "raster": str(raster_path),
                "stem": stem,
                "crs_id": raster.crs_id,
                "shape": [raster.height_px, raster.width_px],
                "geotransform": list(raster.geotransform),
                "tiles": [t.to_dict() for t in tiles],
            },
            indent=2,
        )
        + "\n"
    )
    mosaic = merge_mosaic(predictions, (raster.height_px, raster.width_px), raster.geotransform)
    files = save_mosaic(mosaic, target, raster.crs_id)
    summary = {
        "mosaic": str(files["labels"]),
        "tiles": len(tiles),
        "label_counts": {str(k): int((mosaic.labels == k).sum()) for k in (0, 1, 2)},
        "seconds": elapsed,
        "images_per_second": len(tiles) / elapsed if elapsed > 0 else None,
        "peak_rss_mb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0,
    }
    return summary, [raster_path, ckpt]


def cmd_mosaic(cfg: PipelineConfig, tiles_dir, overwrite: bool = False):
    tiles_dir = Path(tiles_dir)
    index_path = tiles_dir / "index.json"
    if not index_path.is_file():
        raise ConfigurationError(f"no tile index at {index_path}")
    index = json.loads(index_path.read_text())
    target = cfg.out("mosaics") / f"{index['stem']}.png"
    if target.exists() and not overwrite:
        raise OverwriteRefused(f"{target} exists; pass --overwrite to replace it")
    pairs, missing = [], []
    for d in index["tiles"]:
        ref = TileRef.from_dict(d)
        path = tiles_dir / f"{ref.tile_id}.png"
        if not path.is_file():
            missing.append(ref.tile_id)
            continue
        pairs.append((ref, read_mask(path)))
    if missing:
        raise IncompleteError("missing tile predictions", missing)
    mosaic = merge_mosaic(pairs, tuple(index["shape"]), tuple(index["geotransform"]))
    files = save_mosaic(mosaic, target, index.get("crs_id", "unknown"))
    return {"mosaic": str(files["labels"]), "tiles": len(pairs)}, [index_path]


def _predict_test_set(cfg: PipelineConfig, manifest: DatasetManifest, out_dir: Path):
    backend = _backend(cfg)
    decoder, _ = _inference_decoder(cfg)
    conds = text_conditions(backend, cfg.output_root / "cache" / "text_embeddings.json")
    for rec in manifest.split("test"):
        image = read_rgb(rec.image_path)
        labels = segment_multiclass(resize_for_model(image, cfg.tiling.target_px), conds, backend, decoder)
        write_mask(out_dir / f"{rec.image_id}.png", resize_labels(labels, image.shape[:2]))


def cmd_evaluate(cfg: PipelineConfig, predictions_dir=None, overwrite: bool = False):
    manifest = _manifest(cfg)
    reports = _ensure_fresh(cfg.out("reports"), overwrite)
    if predictions_dir is None:
        predictions_dir = reports / "predictions"
        _predict_test_set(cfg, manifest, predictions_dir)
    predictions_dir = Path(predictions_dir)
    preds, missing, inputs = {}, [], [cfg.output_root / MANIFEST_NAME]
    for rec in manifest.split("test"):
        path = predictions_dir / f"{rec.image_id}.png"
        if path.is_file():
            preds[rec.image_id] = read_mask(path)
            inputs.append(path)
        else:
            missing.append(rec.image_id)
    if missing:
        raise IncompleteError("missing prediction files", missing)
    report = evaluate_test_set(manifest, preds)
    report.save(reports / "metrics.json")
    table = report.to_table("micro") + "\n" + report.to_table("macro")
    (reports / "table.txt").write_text(table)
    return {"metrics": str(reports / "metrics.json"), "table": table}, inputs


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="pipeline YAML file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--output-root", help="override paths.output_root")
    common.add_argument("--seed", type=int, help="override runtime.seed")
    common.add_argument("--deterministic", action="store_true", default=None, help="force deterministic mode")
    common.add_argument("--workers", type=int, help="override runtime.worker_count")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="debrisseg", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("tile", parents=[common], help="cut rasters into constant-footprint tiles")
    sub.add_parser("aggregate", parents=[common], help="build consensus masks and the dataset manifest")
    sub.add_parser("engineer", parents=[common], help="build engineered visual prompt pools")
    p = sub.add_parser("train", parents=[common], help="fine-tune the decoder")
    p.add_argument("--resume", action="store_true", help="continue from the last resume state")
    p = sub.add_parser("infer", parents=[common], help="segment a raster into a regional mosaic")
    p.add_argument("raster", help="georeferenced raster to segment")
    p = sub.add_parser("mosaic", parents=[common], help="merge per-tile predictions into a mosaic")
    p.add_argument("tiles_dir", help="directory with per-tile label PNGs and index.json")
    p = sub.add_parser("evaluate", parents=[common], help="score test-set predictions")
    p.add_argument("--predictions", help="directory of <image_id>.png label masks "
                                         "(default: predict with the selected checkpoint)")
    return parser


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for assignment in args.overrides:
        cfg.apply_override(assignment)
    if args.output_root:
        cfg.paths.output_root = str(Path(args.output_root).resolve())
    if args.seed is not None:
        cfg.runtime.seed = args.seed
    if args.deterministic:
        cfg.runtime.deterministic_mode = True
    if args.workers is not None:
        cfg.runtime.worker_count = args.workers
    return cfg.validate()


def _write_run_manifest(cfg, command, argv, status, summary, inputs, error, started) -> Path | None:
    runs = cfg.output_root / "runs"
    try:
        runs.mkdir(parents=True, exist_ok=True)
    except OSError:
        return None
    stamp = started.strftime("%Y%m%dT%H%M%S%fZ")
    path = runs / f"{command}-{stamp}.json"
    hashes = {}
    for p in inputs or []:
        p = Path(p)
        if p.is_file():
            hashes[str(p)] = _sha256(p)
    doc = {
        "command": command,
        "argv": list(argv),
        "status": status,
        "error": error,
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "code_version": _code_version(),
        "seed": cfg.runtime.seed,
        "deterministic_mode": cfg.runtime.deterministic_mode,
        "config": cfg.to_dict(),
        "input_hashes": hashes,
        "summary": summary,
    }
    path.write_text(json.dumps(doc, indent=2, default=str) + "\n")
    return path


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args)
    except DebrisSegError as exc:
        log.error("%s", exc)
        return 1

    started = datetime.now(timezone.utc)
    if cfg.runtime.deterministic_mode:
        import torch

        torch.manual_seed(cfg.runtime.seed)
        np.random.seed(cfg.runtime.seed)
    cmd = args.command
    summary, inputs, status, error = None, [], "ok", None
    try:
        if cmd == "tile":
            summary, inputs = cmd_tile(cfg, args.overwrite)
        elif cmd == "aggregate":
            summary, inputs = cmd_aggregate(cfg, args.overwrite)
        elif cmd == "engineer":
            summary, inputs = cmd_engineer(cfg, args.overwrite)
        elif cmd == "train":
            summary, inputs = cmd_train(cfg, args.overwrite, args.resume)
        elif cmd == "infer":
            summary, inputs = cmd_infer(cfg, args.raster, args.overwrite)
        elif cmd == "mosaic":
            summary, inputs = cmd_mosaic(cfg, args.tiles_dir, args.overwrite)
        elif cmd == "evaluate":
            summary, inputs = cmd_evaluate(cfg, args.predictions, args.overwrite)
    except (DebrisSegError, OSError) as exc:
        status = "partial" if isinstance(exc, IncompleteError) else "failed"
        error = f"{type(exc).__name__}: {exc}"
        log.error("%s", exc)
    _write_run_manifest(cfg, cmd, argv, status, summary, inputs, error, started)
    if summary is not None:
        print(json.dumps({k: v for k, v in summary.items() if k != "table"}, indent=2, default=str))
        if "table" in summary:
            print(summary["table"])
    return 0 if status == "ok" else 1


if __name__ == "__main__":
    sys.exit(main())
