"""Per-channel normalization statistics and patch standardization.

Statistics are computed over the training split only, in a single streaming
pass with pairwise-mergeable moments, so shards processed in parallel can be
combined. The standard deviation is the population one; the choice is
immaterial at corpus scale but fixed for reproducibility.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "ChannelStats",
    "StatsAccumulator",
    "compute_channel_stats",
    "normalize_patch",
    "denormalize_patch",
]

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std and the pixel count they were computed from."""

    mean: np.ndarray
    std: np.ndarray
    n_pixels: int

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be 1-D arrays of equal length")
        if np.any(std <= 0):
            raise ValueError("std entries must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def to_dict(self) -> dict:
        return {
            "mean": [float(x) for x in self.mean],
            "std": [float(x) for x in self.std],
            "n_pixels": int(self.n_pixels),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ChannelStats":
        return cls(
            mean=np.asarray(raw["mean"], dtype=np.float64),
            std=np.asarray(raw["std"], dtype=np.float64),
            n_pixels=int(raw["n_pixels"]),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ChannelStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


class StatsAccumulator:
    """Streaming per-channel count/mean/M2, mergeable across shards."""

    def __init__(self, channels: int = 4) -> None:
        self.channels = channels
        self.count = 0
        self.mean = np.zeros(channels, dtype=np.float64)
        self.m2 = np.zeros(channels, dtype=np.float64)

    def update(self, raster: np.ndarray) -> None:
        arr = np.asarray(raster, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != self.channels:
            raise ValueError(
                f"expected an (H, W, {self.channels}) raster, got shape {arr.shape}"
            )
        flat = arr.reshape(-1, self.channels)
        n_b = flat.shape[0]
        mean_b = flat.mean(axis=0)
        m2_b = np.square(flat - mean_b).sum(axis=0)
        self._merge_moments(n_b, mean_b, m2_b)

    def merge(self, other: "StatsAccumulator") -> None:
        if other.channels != self.channels:
            raise ValueError("cannot merge accumulators with different channel counts")
        self._merge_moments(other.count, other.mean, other.m2)

    def _merge_moments(self, n_b: int, mean_b: np.ndarray, m2_b: np.ndarray) -> None:
        if n_b == 0:
            return
        total = self.count + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / total)
        self.m2 = self.m2 + m2_b + np.square(delta) * (self.count * n_b / total)
        self.count = total

    def finalize(self) -> ChannelStats:
        if self.count == 0:
            raise ValueError("no pixels accumulated")
        std = np.sqrt(self.m2 / self.count)
        low = std < STD_FLOOR
        if np.any(low):
            warnings.warn(
                f"zero-variance channel(s) {np.flatnonzero(low).tolist()}: "
                f"std clamped to {STD_FLOOR}",
                stacklevel=2,
            )
            std = np.where(low, STD_FLOOR, std)
        return ChannelStats(mean=self.mean.copy(), std=std, n_pixels=self.count)


def compute_channel_stats(rasters: Iterable[np.ndarray], channels: int = 4) -> ChannelStats:
    """Single-pass population mean/std over a stream of (H, W, C) rasters."""
    acc = StatsAccumulator(channels)
    for raster in rasters:
        acc.update(raster)
    return acc.finalize()


def normalize_patch(raster: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Per-channel (x - mean) / std, returned as float32."""
    arr = np.asarray(raster, dtype=np.float32)
    if arr.shape[-1] != stats.mean.shape[0]:
        raise ValueError(
            f"expected {stats.mean.shape[0]} channels, got {arr.shape[-1]}"
        )
    return ((arr - stats.mean.astype(np.float32)) / stats.std.astype(np.float32)).astype(
        np.float32
    )


def denormalize_patch(normalized: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Inverse of :func:`normalize_patch`."""
    arr = np.asarray(normalized, dtype=np.float32)
    if arr.shape[-1] != stats.mean.shape[0]:
        raise ValueError(
            f"expected {stats.mean.shape[0]} channels, got {arr.shape[-1]}"
        )
    return (arr * stats.std.astype(np.float32) + stats.mean.astype(np.float32)).astype(
        np.float32
    )
