import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from debrisseg.errors import (
    BoundsError,
    ConfigurationError,
    CoverageError,
    DecodeError,
    UngeoreferencedInputError,
)
from debrisseg.geotile import (
    MIN_TILE_PX,
    GeoRaster,
    TileRef,
    extract_tile,
    load_raster,
    merge_mosaic,
    plan_tiles,
    read_world_file,
    resize_for_model,
    resize_labels,
    save_mosaic,
    save_raster,
    tile_side_px,
    write_world_file,
)


def _raster(h, w, gsd=0.3, seed=0):
    pixels = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    return GeoRaster(pixels, gsd, (500000.0, 3250000.0), "EPSG:32615")


@pytest.mark.parametrize("gsd,side", [(0.15, 333), (0.30, 167), (0.50, 100)])
def test_tile_side(gsd, side):
    assert tile_side_px(50, gsd) == side


def test_tile_side_rounds_half_up():
    assert tile_side_px(50, 50 / 166.5) == 167


@settings(max_examples=120, deadline=None)
@given(
    h=st.integers(1, 420),
    w=st.integers(1, 420),
    gsd=st.sampled_from([0.15, 0.3, 0.5, 0.75]),
    seed=st.integers(0, 2**16),
)
def test_plan_extract_merge_roundtrip(h, w, gsd, seed):
    raster = _raster(h, w, gsd, seed)
    labels = np.random.default_rng(seed).integers(0, 3, size=(h, w)).astype(np.uint8)
    tiles = plan_tiles(raster)
    side = tile_side_px(50, gsd)
    for t in tiles:
        r0, c0, nr, nc = t.pixel_window
        assert nr <= side + MIN_TILE_PX and nc <= side + MIN_TILE_PX
        assert (nr >= MIN_TILE_PX or nr == h) and (nc >= MIN_TILE_PX or nc == w)
        np.testing.assert_array_equal(extract_tile(raster, t), raster.pixels[r0 : r0 + nr, c0 : c0 + nc])
    mosaic = merge_mosaic([(t, labels[t.pixel_window[0] :, t.pixel_window[1] :][: t.pixel_window[2], : t.pixel_window[3]]) for t in tiles])
    np.testing.assert_array_equal(mosaic.labels, labels)
    assert mosaic.geotransform == pytest.approx(raster.geotransform)


def test_geo_bounds_follow_pixels():
    raster = _raster(200, 300, 0.5)
    t = plan_tiles(raster)[1]
    assert t.tile_id == "r0000_c0001"
    min_e, min_n, max_e, max_n = t.geo_bounds
    assert min_e == pytest.approx(500000.0 + 100 * 0.5)
    assert max_e - min_e == pytest.approx(50.0)
    assert max_n == pytest.approx(3250000.0)
    assert TileRef.from_dict(json.loads(json.dumps(t.to_dict()))) == t


def test_merge_reports_gaps_and_overlaps():
    raster = _raster(40, 40, 0.5)
    tiles = [TileRef("a", 0, 0, (0, 0, 40, 20), (0, 0, 0, 0)), TileRef("b", 0, 1, (0, 10, 20, 20), (0, 0, 0, 0))]
    with pytest.raises(CoverageError) as info:
        merge_mosaic([(t, np.zeros(t.pixel_window[2:], np.uint8)) for t in tiles], (40, 40), raster.geotransform)
    assert info.value.gaps and info.value.overlaps


def test_extract_out_of_bounds():
    with pytest.raises(BoundsError):
        extract_tile(_raster(10, 10), TileRef("x", 0, 0, (5, 5, 10, 10), (0, 0, 0, 0)))


def test_resize_for_model():
    crop = _raster(167, 167).pixels
    out = resize_for_model(crop, 352)
    assert out.shape == (352, 352, 3) and out.dtype == np.uint8
    same = resize_for_model(out, 352)
    np.testing.assert_array_equal(same, out)
    with pytest.raises(ConfigurationError):
        resize_for_model(crop, 350)


def test_resize_labels_nearest():
    labels = np.kron(np.array([[0, 1], [2, 1]], np.uint8), np.ones((16, 16), np.uint8))
    up = resize_labels(labels, (64, 64))
    np.testing.assert_array_equal(resize_labels(up, (32, 32)), labels)
    assert set(np.unique(resize_labels(labels, (13, 29)))) <= {0, 1, 2}


def test_raster_roundtrip_with_world_file(tmp_path):
    raster = _raster(30, 50, 0.3)
    path = save_raster(raster, tmp_path / "scene.png")
    loaded = load_raster(path)
    np.testing.assert_array_equal(loaded.pixels, raster.pixels)
    assert loaded.geotransform == pytest.approx(raster.geotransform)
    assert loaded.crs_id == "EPSG:32615"


def test_world_file_is_pixel_centre_anchored(tmp_path):
    gt = (100.0, 0.5, 0.0, 200.0, 0.0, -0.5)
    write_world_file(tmp_path / "a.pgw", gt)
    lines = (tmp_path / "a.pgw").read_text().split()
    assert float(lines[4]) == pytest.approx(100.25) and float(lines[5]) == pytest.approx(199.75)
    assert read_world_file(tmp_path / "a.pgw") == pytest.approx(gt)


def test_ungeoreferenced_input(tmp_path):
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "plain.png")
    with pytest.raises(UngeoreferencedInputError, match="geotransform"):
        load_raster(tmp_path / "plain.png")


def test_undecodable_and_anisotropic(tmp_path):
    (tmp_path / "junk.tif").write_bytes(b"not an image")
    with pytest.raises(DecodeError):
        load_raster(tmp_path / "junk.tif")
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "aniso.png")
    write_world_file(tmp_path / "aniso.pgw", (0.0, 0.3, 0.0, 10.0, 0.0, -0.5))
    with pytest.raises(ConfigurationError, match="anisotropic"):
        load_raster(tmp_path / "aniso.png")


def test_geotiff_tags(tmp_path):
    arr = _raster(20, 30).pixels
    img = Image.fromarray(arr)
    from PIL.TiffImagePlugin import ImageFileDirectory_v2

    ifd = ImageFileDirectory_v2()
    ifd[33550] = (0.25, 0.25, 0.0)
    ifd[33922] = (0.0, 0.0, 0.0, 1000.0, 2000.0, 0.0)
    ifd[34735] = (1, 1, 0, 1, 3072, 0, 1, 32615)
    img.save(tmp_path / "g.tif", tiffinfo=ifd)
    r = load_raster(tmp_path / "g.tif")
    assert r.gsd_m == pytest.approx(0.25)
    assert r.origin == pytest.approx((1000.0, 2000.0))
    assert r.crs_id == "EPSG:32615"


def test_save_mosaic(tmp_path):
    raster = _raster(60, 60, 0.5)
    labels = np.random.default_rng(1).integers(0, 3, (60, 60)).astype(np.uint8)
    tiles = plan_tiles(raster)
    mosaic = merge_mosaic([(t, labels[t.pixel_window[0] : t.pixel_window[0] + t.pixel_window[2], t.pixel_window[1] : t.pixel_window[1] + t.pixel_window[3]]) for t in tiles])
    files = save_mosaic(mosaic, tmp_path / "m.png", "EPSG:32615")
    img = Image.open(files["labels"])
    assert img.mode == "P"
    np.testing.assert_array_equal(np.asarray(img), labels)
    prov = json.loads(files["provenance"].read_text())
    assert prov["crs_id"] == "EPSG:32615" and len(prov["tiles"]) == len(tiles)
    assert read_world_file(files["world"]) == pytest.approx(raster.geotransform)
