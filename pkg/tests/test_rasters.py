import numpy as np
import pytest

from temporal_lulc.rasters import (
    RAW_MAGIC,
    RasterFormatError,
    read_raster,
    read_raw_raster,
    register_raster_reader,
    resample_raster,
    write_raw_raster,
)


def test_raw_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(13, 9, 4)).astype(np.float32)
    path = tmp_path / "patch.tlc"
    write_raw_raster(path, arr)
    back = read_raw_raster(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_raw_header_layout(tmp_path):
    path = tmp_path / "one.tlc"
    write_raw_raster(path, np.zeros((2, 3, 4), dtype=np.float32))
    blob = path.read_bytes()
    assert blob[:4] == RAW_MAGIC
    assert int.from_bytes(blob[4:8], "little") == 2
    assert int.from_bytes(blob[8:12], "little") == 3
    assert int.from_bytes(blob[12:16], "little") == 4
    assert len(blob) == 16 + 2 * 3 * 4 * 4


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.tlc"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(RasterFormatError, match="magic"):
        read_raw_raster(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "short.tlc"
    write_raw_raster(path, np.zeros((4, 4, 4), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(RasterFormatError, match="payload"):
        read_raw_raster(path)


def test_non_3d_rejected(tmp_path):
    with pytest.raises(RasterFormatError):
        write_raw_raster(tmp_path / "x.tlc", np.zeros((4, 4)))


def test_reader_registry_dispatch(tmp_path):
    calls = []

    def fake_reader(path):
        calls.append(path)
        return np.ones((2, 2, 4), dtype=np.float32)

    register_raster_reader(".fake", fake_reader)
    path = tmp_path / "tile.fake"
    path.touch()
    arr = read_raster(path)
    assert calls and arr.shape == (2, 2, 4)


def test_unknown_extension_rejected(tmp_path):
    with pytest.raises(RasterFormatError, match="no raster reader"):
        read_raster(tmp_path / "tile.xyz")


def test_tiff_round_trip_via_optional_backend(tmp_path):
    tifffile = pytest.importorskip("tifffile")
    arr = np.random.default_rng(2).normal(size=(6, 5, 4)).astype(np.float32)
    path = tmp_path / "geo.tif"
    tifffile.imwrite(path, arr)
    back = read_raster(path)
    assert back.shape == (6, 5, 4)
    np.testing.assert_allclose(back, arr, atol=1e-6)


def test_resample_preserves_constant_fields():
    arr = np.full((10, 10, 4), 0.37, dtype=np.float32)
    out = resample_raster(arr, 16)
    assert out.shape == (16, 16, 4)
    np.testing.assert_allclose(out, 0.37, atol=1e-6)


def test_resample_identity_size_copies():
    arr = np.random.default_rng(1).normal(size=(8, 8, 4)).astype(np.float32)
    out = resample_raster(arr, 8)
    assert np.array_equal(out, arr)
    assert out is not arr
