"""Synthetic separable debris scenes for smoke tests and offline demos.

Scenes are dark textured ground with debris laid out on the 16 px patch
grid: solid bright blocks are high-density, bright speckle blocks are
low-density. Because each label is constant on whole patches, a decoder fed
patch tokens can separate the classes exactly.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .annotation import annotation_filename, write_mask
from .geotile import GeoRaster, save_raster, write_rgb

PATCH = 16


def ground(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = np.array([52, 60, 38], dtype=np.int16)
    noise = rng.integers(-12, 13, size=(h, w, 3), dtype=np.int16)
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def paint_debris(img: np.ndarray, truth: np.ndarray, rng: np.random.Generator, density: float = 0.35) -> None:
    """Fill labelled patches in place: label 2 solid bright, label 1 bright speckle."""
    high = truth == 2
    img[high] = np.clip(235 + rng.integers(-15, 16, size=(int(high.sum()), 3)), 0, 255)
    low = truth == 1
    rr, cc = np.nonzero(low)
    speckle = (rr // 2 + cc // 2) % 2 == 0
    img[rr[speckle], cc[speckle]] = np.array([210, 190, 170], dtype=np.uint8)


def synth_tile(rng: np.random.Generator, size: int = 64, positive: bool = True):
    """One square scene and its ground-truth density labels."""
    img = ground(rng, size, size)
    truth = np.zeros((size, size), dtype=np.uint8)
    if positive:
        n = size // PATCH
        levels = rng.choice(3, size=(n, n), p=[0.5, 0.25, 0.25])
        # guarantee both debris levels appear
        cells = rng.permutation(n * n)[:2]
        levels.flat[cells[0]], levels.flat[cells[1]] = 1, 2
        truth = np.kron(levels, np.ones((PATCH, PATCH), dtype=np.int64)).astype(np.uint8)
        paint_debris(img, truth, rng)
    return img, truth


def synth_annotations(rng: np.random.Generator, truth: np.ndarray, n_annotators: int = 3) -> list[np.ndarray]:
    """Annotator masks whose ceiling-mean consensus equals ``truth``.

    The last annotator under-labels random debris patches, which the
    consensus absorbs while the other annotators agree with the truth.
    """
    masks = [truth.copy() for _ in range(n_annotators)]
    if n_annotators >= 2:
        sloppy = masks[-1]
        n = truth.shape[0] // PATCH
        for r in range(n):
            for c in range(n):
                block = sloppy[r * PATCH : (r + 1) * PATCH, c * PATCH : (c + 1) * PATCH]
                if block.max() > 0 and rng.random() < 0.5:
                    block -= 1
    return masks


def write_synthetic_dataset(
    root,
    events=(("Ian", 20), ("Ike", 20), ("Ida", 8)),
    size: int = 64,
    seed: int = 0,
    n_annotators: int = 3,
) -> dict[str, Path]:
    """Write images, annotator masks and a records CSV under ``root``.

    Images alternate positive/negative within each event.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    image_dir = root / "images"
    ann_dir = root / "annotations"
    rows = []
    for event, count in events:
        for k in range(count):
            image_id = f"{event.lower()}_{k:03d}"
            img, truth = synth_tile(rng, size, positive=(k % 2 == 0))
            path = write_rgb(image_dir / f"{image_id}.png", img)
            for a, mask in enumerate(synth_annotations(rng, truth, n_annotators)):
                write_mask(ann_dir / annotation_filename(image_id, f"a{a + 1}"), mask)
            rows.append({"image_id": image_id, "event": event, "region": f"{event.lower()}-synthetic",
                         "image_path": path.relative_to(root).as_posix()})
    records = root / "records.csv"
    with open(records, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["image_id", "event", "region", "image_path"])
        writer.writeheader()
        writer.writerows(rows)
    return {"images": image_dir, "annotations": ann_dir, "records": records}


def synth_raster(
    rng: np.random.Generator,
    height: int,
    width: int,
    gsd_m: float,
    debris: bool = False,
    origin=(500000.0, 3250000.0),
) -> tuple[GeoRaster, np.ndarray]:
    img = ground(rng, height, width)
    truth = np.zeros((height, width), dtype=np.uint8)
    if debris:
        gh, gw = height // PATCH, width // PATCH
        levels = rng.choice(3, size=(gh, gw), p=[0.6, 0.2, 0.2])
        truth[: gh * PATCH, : gw * PATCH] = np.kron(levels, np.ones((PATCH, PATCH), dtype=np.int64))
        paint_debris(img, truth, rng)
    return GeoRaster(img, gsd_m, origin, "EPSG:32615"), truth


def write_synthetic_raster(path, **kwargs) -> Path:
    rng = np.random.default_rng(kwargs.pop("seed", 0))
    raster, _ = synth_raster(rng, **kwargs)
    return save_raster(raster, path)
