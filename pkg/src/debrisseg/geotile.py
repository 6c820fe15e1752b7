"""Georeferenced raster ingestion, constant-footprint tiling and mosaicking.

Geotransforms follow the GDAL ordering ``(origin_e, gsd, 0, origin_n, 0, -gsd)``
with the origin at the top-left corner of the top-left pixel.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    BoundsError,
    ConfigurationError,
    CoverageError,
    DecodeError,
    EmptyInputError,
    ShapeError,
    UngeoreferencedInputError,
)

PATCH_SIZE = 16
MIN_TILE_PX = 16
DEFAULT_GROUND_SIZE_M = 50.0
DEFAULT_TARGET_PX = 352

# GeoTIFF tag ids
_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_TRANSFORMATION = 34264
_TAG_GEOKEYS = 34735
_GEOKEY_PROJECTED_CS = 3072
_GEOKEY_GEOGRAPHIC_CS = 2048

_WORLD_SUFFIXES = {
    ".tif": ".tfw",
    ".tiff": ".tfw",
    ".png": ".pgw",
    ".jpg": ".jgw",
    ".jpeg": ".jgw",
}

# index 0 is rendered transparent
MOSAIC_PALETTE = [0, 0, 0, 255, 215, 0, 230, 90, 0]


@dataclass
class GeoRaster:
    pixels: np.ndarray
    gsd_m: float
    origin: tuple[float, float]
    crs_id: str = "unknown"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"expected an HxWx3 RGB grid, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise EmptyInputError("raster has no pixels")
        if px.dtype != np.uint8:
            raise ShapeError(f"expected 8-bit pixels, got {px.dtype}")
        if not (self.gsd_m > 0 and math.isfinite(self.gsd_m)):
            raise ConfigurationError(f"gsd_m must be positive, got {self.gsd_m}")
        self.pixels = px
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def geotransform(self) -> tuple[float, ...]:
        return (self.origin[0], self.gsd_m, 0.0, self.origin[1], 0.0, -self.gsd_m)


@dataclass(frozen=True)
class TileRef:
    tile_id: str
    grid_row: int
    grid_col: int
    pixel_window: tuple[int, int, int, int]  # row0, col0, n_rows, n_cols
    geo_bounds: tuple[float, float, float, float]  # min_e, min_n, max_e, max_n

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "grid_row": self.grid_row,
            "grid_col": self.grid_col,
            "pixel_window": list(self.pixel_window),
            "geo_bounds": list(self.geo_bounds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TileRef":
        return cls(
            tile_id=d["tile_id"],
            grid_row=int(d["grid_row"]),
            grid_col=int(d["grid_col"]),
            pixel_window=tuple(int(v) for v in d["pixel_window"]),
            geo_bounds=tuple(float(v) for v in d["geo_bounds"]),
        )


@dataclass
class Mosaic:
    labels: np.ndarray
    geotransform: tuple[float, ...]
    provenance: list[str] = field(default_factory=list)
    tiles: list[TileRef] = field(default_factory=list)


def window_geo_bounds(window, geotransform) -> tuple[float, float, float, float]:
    row0, col0, n_rows, n_cols = window
    e0, gsd, _, n0, _, neg_gsd = geotransform
    min_e = e0 + col0 * gsd
    max_e = e0 + (col0 + n_cols) * gsd
    max_n = n0 + row0 * neg_gsd
    min_n = n0 + (row0 + n_rows) * neg_gsd
    return (min_e, min_n, max_e, max_n)


# ---------------------------------------------------------------------------
# loading


def _world_file_candidates(path: Path) -> list[Path]:
    cands = []
    suffix = path.suffix.lower()
    if suffix in _WORLD_SUFFIXES:
        cands.append(path.with_suffix(_WORLD_SUFFIXES[suffix]))
    if suffix:
        cands.append(path.with_suffix(suffix + "w"))
    cands.append(path.with_suffix(".wld"))
    seen, out = set(), []
    for c in cands:
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def read_world_file(path: Path) -> tuple[float, ...]:
    """Parse a six-line world file into a corner-anchored geotransform."""
    try:
        values = [float(line) for line in Path(path).read_text().split()]
    except ValueError as exc:
        raise UngeoreferencedInputError(path, "world file coefficients") from exc
    if len(values) != 6:
        raise UngeoreferencedInputError(path, "world file coefficients (need 6)")
    a, d, b, e, c, f = values
    if d != 0.0 or b != 0.0:
        raise UngeoreferencedInputError(path, "rotation-free geotransform")
    # world files anchor at the centre of the top-left pixel
    return (c - a / 2.0, a, 0.0, f - e / 2.0, 0.0, e)


def write_world_file(path: Path, geotransform: Sequence[float]) -> None:
    e0, gsd_x, _, n0, _, gsd_y = geotransform
    lines = [gsd_x, 0.0, 0.0, gsd_y, e0 + gsd_x / 2.0, n0 + gsd_y / 2.0]
    Path(path).write_text("".join(f"{v!r}\n" for v in lines))


def _geotiff_transform(img: Image.Image, path: Path):
    tags = getattr(img, "tag_v2", None)
    if tags is None:
        return None, None
    has_scale = _TAG_PIXEL_SCALE in tags
    has_tie = _TAG_TIEPOINT in tags
    crs = None
    if _TAG_GEOKEYS in tags:
        keys = list(tags[_TAG_GEOKEYS])
        for i in range(4, len(keys) - 3, 4):
            key_id, loc, _count, value = keys[i : i + 4]
            if loc == 0 and key_id in (_GEOKEY_PROJECTED_CS, _GEOKEY_GEOGRAPHIC_CS):
                crs = f"EPSG:{value}"
                break
    if _TAG_TRANSFORMATION in tags and not (has_scale and has_tie):
        raise UngeoreferencedInputError(path, "ModelPixelScale/ModelTiepoint tags")
    if not (has_scale or has_tie):
        return None, crs
    if not has_scale:
        raise UngeoreferencedInputError(path, "ModelPixelScale tag")
    if not has_tie:
        raise UngeoreferencedInputError(path, "ModelTiepoint tag")
    sx, sy = float(tags[_TAG_PIXEL_SCALE][0]), float(tags[_TAG_PIXEL_SCALE][1])
    tie = [float(v) for v in tags[_TAG_TIEPOINT]]
    i, j, x, y = tie[0], tie[1], tie[3], tie[4]
    return (x - i * sx, sx, 0.0, y + j * sy, 0.0, -sy), crs


def load_raster(path) -> GeoRaster:
    """Read an 8-bit RGB raster and its georeferencing.

    Embedded GeoTIFF tags are used when present, otherwise a world-file
    sidecar. An optional ``.prj`` or ``.crs`` sidecar supplies ``crs_id``.
    Alpha channels are dropped.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"raster not found: {path}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:  # PIL raises several unrelated types
        raise DecodeError(f"cannot decode raster {path}: {exc}") from exc

    transform, crs = _geotiff_transform(img, path)
    if transform is None:
        world = next((c for c in _world_file_candidates(path) if c.is_file()), None)
        if world is None:
            raise UngeoreferencedInputError(path, "geotransform (no GeoTIFF tags or world file)")
        transform = read_world_file(world)

    if img.mode in ("RGBA", "P", "LA", "PA"):
        img = img.convert("RGBA").convert("RGB")
    elif img.mode != "RGB":
        raise DecodeError(f"{path} is not an 8-bit RGB raster (mode {img.mode})")
    pixels = np.asarray(img, dtype=np.uint8).copy()

    e0, gsd_x, _, n0, _, gsd_y = transform
    if gsd_x <= 0 or gsd_y >= 0:
        raise UngeoreferencedInputError(path, "north-up pixel size")
    if not math.isclose(gsd_x, -gsd_y, rel_tol=1e-9, abs_tol=0.0):
        raise ConfigurationError(
            f"{path}: anisotropic ground sample distance ({gsd_x}, {-gsd_y}) is not supported"
        )

    if crs is None:
        for sidecar in (path.with_suffix(".crs"), path.with_suffix(".prj")):
            if sidecar.is_file():
                crs = sidecar.read_text().strip() or None
                break
    return GeoRaster(pixels=pixels, gsd_m=gsd_x, origin=(e0, n0), crs_id=crs or "unknown")


def save_raster(raster: GeoRaster, path) -> Path:
    """Write pixels as an image with a world-file sidecar (and ``.crs`` if known)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(raster.pixels, mode="RGB").save(path)
    write_world_file(_world_file_candidates(path)[0], raster.geotransform)
    if raster.crs_id != "unknown":
        path.with_suffix(".crs").write_text(raster.crs_id + "\n")
    return path


# ---------------------------------------------------------------------------
# tiling


def tile_side_px(ground_size_m: float, gsd_m: float) -> int:
    if ground_size_m <= 0:
        raise ConfigurationError(f"ground_size_m must be positive, got {ground_size_m}")
    # round half up; Python's round() is banker's rounding
    return max(1, int(math.floor(ground_size_m / gsd_m + 0.5)))


def _axis_spans(length: int, side: int) -> list[tuple[int, int]]:
    spans = []
    start = 0
    while start < length:
        n = min(side, length - start)
        spans.append((start, n))
        start += n
    if len(spans) > 1 and spans[-1][1] < MIN_TILE_PX:
        # fold the sliver into its neighbour so coverage stays complete
        _, n = spans.pop()
        ps, pn = spans[-1]
        spans[-1] = (ps, pn + n)
    return spans


def plan_tiles(raster: GeoRaster, ground_size_m: float = DEFAULT_GROUND_SIZE_M) -> list[TileRef]:
    if raster.height_px < 1 or raster.width_px < 1:
        raise EmptyInputError("raster smaller than one pixel")
    side = tile_side_px(ground_size_m, raster.gsd_m)
    gt = raster.geotransform
    tiles = []
    for gr, (row0, n_rows) in enumerate(_axis_spans(raster.height_px, side)):
        for gc, (col0, n_cols) in enumerate(_axis_spans(raster.width_px, side)):
            window = (row0, col0, n_rows, n_cols)
            tiles.append(
                TileRef(
                    tile_id=f"r{gr:04d}_c{gc:04d}",
                    grid_row=gr,
                    grid_col=gc,
                    pixel_window=window,
                    geo_bounds=window_geo_bounds(window, gt),
                )
            )
    return tiles


def extract_tile(raster: GeoRaster, tile: TileRef) -> np.ndarray:
    row0, col0, n_rows, n_cols = tile.pixel_window
    if (
        row0 < 0
        or col0 < 0
        or n_rows < 1
        or n_cols < 1
        or row0 + n_rows > raster.height_px
        or col0 + n_cols > raster.width_px
    ):
        raise BoundsError(
            f"window {tile.pixel_window} outside raster of {raster.height_px}x{raster.width_px}"
        )
    return raster.pixels[row0 : row0 + n_rows, col0 : col0 + n_cols].copy()


def resize_for_model(crop: np.ndarray, target_px: int = DEFAULT_TARGET_PX) -> np.ndarray:
    if target_px < 1 or target_px % PATCH_SIZE:
        raise ConfigurationError(
            f"target_px must be a positive multiple of {PATCH_SIZE}, got {target_px}"
        )
    crop = np.asarray(crop)
    if crop.size == 0:
        raise EmptyInputError("cannot resize an empty crop")
    if crop.shape[:2] == (target_px, target_px):
        return crop.copy()
    img = Image.fromarray(crop)
    return np.asarray(img.resize((target_px, target_px), Image.BILINEAR))


def resize_labels(labels: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling of an integer label grid."""
    labels = np.asarray(labels)
    h_in, w_in = labels.shape
    h_out, w_out = shape
    if (h_in, w_in) == (h_out, w_out):
        return labels.copy()
    rows = np.minimum((np.arange(h_out) * 2 + 1) * h_in // (2 * h_out), h_in - 1)
    cols = np.minimum((np.arange(w_out) * 2 + 1) * w_in // (2 * w_out), w_in - 1)
    return labels[np.ix_(rows, cols)]


# ---------------------------------------------------------------------------
# mosaicking


def _regions(mask: np.ndarray) -> list[tuple[int, int, int, int]]:
    lab, _ = ndimage.label(mask)
    out = []
    for sl in ndimage.find_objects(lab):
        out.append((sl[0].start, sl[1].start, sl[0].stop - sl[0].start, sl[1].stop - sl[1].start))
    return out


def merge_mosaic(
    tiles: Iterable[tuple[TileRef, np.ndarray]],
    shape: tuple[int, int] | None = None,
    geotransform: Sequence[float] | None = None,
) -> Mosaic:
    """Paste per-tile label masks into one regional grid.

    ``shape`` defaults to the extent of the tile windows; gaps and overlaps
    are reported as ``(row0, col0, n_rows, n_cols)`` windows.
    """
    tiles = list(tiles)
    if not tiles:
        raise EmptyInputError("no tiles to merge")
    if shape is None:
        shape = (
            max(t.pixel_window[0] + t.pixel_window[2] for t, _ in tiles),
            max(t.pixel_window[1] + t.pixel_window[3] for t, _ in tiles),
        )
    labels = np.zeros(shape, dtype=np.uint8)
    count = np.zeros(shape, dtype=np.int32)
    for ref, mask in tiles:
        row0, col0, n_rows, n_cols = ref.pixel_window
        mask = np.asarray(mask)
        if mask.shape != (n_rows, n_cols):
            raise ShapeError(
                f"tile {ref.tile_id}: mask shape {mask.shape} != window {(n_rows, n_cols)}"
            )
        if row0 < 0 or col0 < 0 or row0 + n_rows > shape[0] or col0 + n_cols > shape[1]:
            raise BoundsError(f"tile {ref.tile_id} window {ref.pixel_window} outside {shape}")
        if mask.size and (mask.min() < 0 or mask.max() > 2):
            raise ShapeError(f"tile {ref.tile_id}: labels outside {{0,1,2}}")
        labels[row0 : row0 + n_rows, col0 : col0 + n_cols] = mask
        count[row0 : row0 + n_rows, col0 : col0 + n_cols] += 1
    if (count != 1).any():
        raise CoverageError(_regions(count == 0), _regions(count > 1))

    if geotransform is None:
        ref = tiles[0][0]
        min_e, _, max_e, max_n = ref.geo_bounds
        gsd = (max_e - min_e) / ref.pixel_window[3]
        geotransform = (
            min_e - ref.pixel_window[1] * gsd,
            gsd,
            0.0,
            max_n + ref.pixel_window[0] * gsd,
            0.0,
            -gsd,
        )
    return Mosaic(
        labels=labels,
        geotransform=tuple(float(v) for v in geotransform),
        provenance=[t.tile_id for t, _ in tiles],
        tiles=[t for t, _ in tiles],
    )


def write_label_png(path, labels: np.ndarray) -> Path:
    """Single-channel paletted PNG; label 0 is transparent."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    img.putpalette(MOSAIC_PALETTE)
    img.save(path, transparency=0)
    return path


def save_mosaic(mosaic: Mosaic, path, crs_id: str = "unknown") -> dict[str, Path]:
    """Write the label image, a world-file sidecar and a provenance manifest."""
    path = Path(path)
    write_label_png(path, mosaic.labels)
    world = _world_file_candidates(path)[0]
    write_world_file(world, mosaic.geotransform)
    prov = path.with_name(path.stem + ".provenance.json")
    prov.write_text(
        json.dumps(
            {
                "schema_version": 1,
                "crs_id": crs_id,
                "shape": list(mosaic.labels.shape),
                "geotransform": list(mosaic.geotransform),
                "tiles": [
                    {"tile_id": t.tile_id, "geo_bounds": list(t.geo_bounds)}
                    for t in mosaic.tiles
                ],
            },
            indent=2,
        )
        + "\n"
    )
    return {"labels": path, "world": world, "provenance": prov}


def read_rgb(path) -> np.ndarray:
    """Load a plain (non-georeferenced) image as an HxWx3 uint8 array."""
    img = Image.open(path)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.uint8).copy()


def write_rgb(path, pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path)
    return path
