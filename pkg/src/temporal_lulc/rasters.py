"""Raster I/O.

The core format is a dependency-free raw tensor file: magic ``TLC1``, then
little-endian u32 height / width / channels and float32 pixel data, row-major
and channel-last. Other formats plug in through a reader registry keyed by
file extension; georeferenced TIFF is wired to optional backends (rasterio or
tifffile) and fails with a clear message when neither is installed.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "RAW_MAGIC",
    "RAW_EXTENSION",
    "RasterFormatError",
    "write_raw_raster",
    "read_raw_raster",
    "register_raster_reader",
    "read_raster",
    "resample_raster",
]

RAW_MAGIC = b"TLC1"
RAW_EXTENSION = ".tlc"
_HEADER = struct.Struct("<III")


class RasterFormatError(ValueError):
    """Unreadable or structurally invalid raster file."""


def write_raw_raster(path: str | Path, array: np.ndarray) -> Path:
    """Write an (H, W, C) float32 array in the raw tensor format."""
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise RasterFormatError(f"expected an (H, W, C) array, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(_HEADER.pack(*arr.shape))
        fh.write(arr.tobytes())
    return path


def read_raw_raster(path: str | Path) -> np.ndarray:
    """Read a raw tensor file back into an (H, W, C) float32 array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RAW_MAGIC:
            raise RasterFormatError(f"{path}: bad magic {magic!r}, expected {RAW_MAGIC!r}")
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise RasterFormatError(f"{path}: truncated header")
        h, w, c = _HEADER.unpack(header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w * c:
        raise RasterFormatError(
            f"{path}: payload holds {data.size} values, header promises {h * w * c}"
        )
    return data.reshape(h, w, c).copy()


def _read_geotiff(path: str | Path) -> np.ndarray:
    try:
        import rasterio  # type: ignore
    except ImportError:
        rasterio = None
    if rasterio is not None:
        with rasterio.open(path) as src:
            return np.moveaxis(src.read().astype(np.float32), 0, -1)
    try:
        import tifffile  # type: ignore
    except ImportError:
        raise RasterFormatError(
            f"{path}: reading TIFF requires the optional 'rasterio' or 'tifffile' package"
        ) from None
    arr = np.asarray(tifffile.imread(path), dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


_READERS: dict[str, Callable[[str | Path], np.ndarray]] = {
    RAW_EXTENSION: read_raw_raster,
    ".tif": _read_geotiff,
    ".tiff": _read_geotiff,
}


def register_raster_reader(extension: str, reader: Callable[[str | Path], np.ndarray]) -> None:
    """Register (or replace) the reader used for files with this extension."""
    if not extension.startswith("."):
        extension = "." + extension
    _READERS[extension.lower()] = reader


def read_raster(path: str | Path) -> np.ndarray:
    """Dispatch to the registered reader for the file's extension."""
    ext = Path(path).suffix.lower()
    reader = _READERS.get(ext)
    if reader is None:
        raise RasterFormatError(
            f"no raster reader registered for {ext!r} (known: {sorted(_READERS)})"
        )
    return reader(path)


def resample_raster(array: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinearly resample an (H, W, C) array to the requested pixel size."""
    import torch
    import torch.nn.functional as F

    if isinstance(size, int):
        size = (size, size)
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim != 3:
        raise RasterFormatError(f"expected an (H, W, C) array, got shape {arr.shape}")
    if arr.shape[:2] == tuple(size):
        return arr.copy()
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).contiguous().numpy()
