"""Tile-level LULC maps and post-classification change detection.

A map holds one predicted distribution per patch cell plus the dominant
(argmax) class. Change detection compares the dominant classes of two maps
of the same tile: a cell is *changed* when the dominants differ and both
dominant probabilities reach the confidence floor, and *uncertain* when they
differ below it; raw argmax flips on near-uniform cells would otherwise
produce speckle. Maps render to PNG as solid color blocks with a JSON legend
sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .dataset import TileSpec, tile_to_patches
from .models import ArtifactBundle, mono_forward, temporal_forward
from .preprocess import normalize_patch

__all__ = [
    "LulcMap",
    "ChangeMap",
    "predict_map",
    "change_detect",
    "mask_iou",
    "render_map_png",
    "render_change_png",
    "PALETTE",
]

# Display colors per CLC code: reds for artificial, yellows/oranges for
# agriculture, greens for forest and semi-natural, violet for wetlands,
# blues for water.
PALETTE: dict[str, tuple[int, int, int]] = {
    "1": (230, 0, 77), "2": (255, 234, 128), "3": (71, 150, 56),
    "4": (166, 166, 255), "5": (0, 204, 242),
    "31": (71, 150, 56), "32": (166, 242, 77), "33": (204, 242, 166),
    "11": (230, 0, 77), "12": (204, 77, 242), "13": (166, 77, 0),
    "14": (255, 166, 255), "21": (255, 255, 168), "22": (242, 166, 77),
    "23": (230, 230, 77), "24": (255, 230, 166), "41": (166, 166, 255),
    "42": (204, 204, 255), "51": (0, 204, 242), "52": (0, 102, 204),
}
_CHANGE_COLORS = {"unchanged": (217, 217, 217), "changed": (214, 39, 40), "uncertain": (255, 191, 0)}


@dataclass
class LulcMap:
    """Per-cell dominant class and distribution for one tile."""

    tile_id: str
    level_name: str
    grid_n: int
    cells: np.ndarray  # (grid_n, grid_n) int16 class indices
    legend: tuple[dict, ...]  # ({"code", "name"}, ...) in class index order
    label: str  # e.g. "month_06" or "annual"
    dists: np.ndarray | None = None  # (grid_n, grid_n, n_classes)

    def __post_init__(self) -> None:
        cells = np.asarray(self.cells, dtype=np.int16)
        if cells.shape != (self.grid_n, self.grid_n):
            raise ValueError(f"cells shape {cells.shape} != grid ({self.grid_n}, {self.grid_n})")
        self.cells = cells

    def dominant_confidence(self) -> np.ndarray:
        if self.dists is None:
            raise ValueError("map was built without distributions")
        return self.dists.max(axis=2)

    def to_dict(self, include_dists: bool = False) -> dict:
        out = {
            "tile_id": self.tile_id,
            "level": self.level_name,
            "grid_n": self.grid_n,
            "label": self.label,
            "legend": [dict(entry) for entry in self.legend],
            "cells": self.cells.tolist(),
        }
        if include_dists and self.dists is not None:
            out["dists"] = self.dists.tolist()
        return out

    def save(self, path: str | Path, include_dists: bool = False) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(include_dists)) + "\n")
        return path

    @classmethod
    def from_dict(cls, raw: dict) -> "LulcMap":
        dists = raw.get("dists")
        return cls(
            tile_id=raw["tile_id"],
            level_name=raw["level"],
            grid_n=raw["grid_n"],
            cells=np.asarray(raw["cells"], dtype=np.int16),
            legend=tuple(raw["legend"]),
            label=raw.get("label", ""),
            dists=None if dists is None else np.asarray(dists),
        )


@dataclass
class ChangeMap:
    """Cell-wise change verdicts between two maps of the same tile."""

    tile_id: str
    level_name: str
    grid_n: int
    changed: np.ndarray  # (grid_n, grid_n) bool
    uncertain: np.ndarray  # (grid_n, grid_n) bool
    pairs: np.ndarray  # (grid_n, grid_n, 2) int16; (-1, -1) where unchanged
    epochs: tuple[str, str]
    min_confidence: float
    legend: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "level": self.level_name,
            "grid_n": self.grid_n,
            "epochs": list(self.epochs),
            "min_confidence": self.min_confidence,
            "legend": [dict(entry) for entry in self.legend],
            "changed": self.changed.astype(int).tolist(),
            "uncertain": self.uncertain.astype(int).tolist(),
            "pairs": self.pairs.tolist(),
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()) + "\n")
        return path


def _legend_for(bundle: ArtifactBundle) -> tuple[dict, ...]:
    return tuple({"code": c.code, "name": c.name} for c in bundle.level.classes)


def predict_map(
    bundle: ArtifactBundle,
    rasters: np.ndarray | Mapping[int, np.ndarray],
    tile_spec: TileSpec,
    batch_size: int = 256,
) -> LulcMap:
    """Classify every patch cell of a tile.

    Mono artifacts take a single (H, W, 4) raster; temporal artifacts take a
    mapping month -> raster covering all 12 months.
    """
    n = tile_spec.grid_n
    if bundle.kind == "mono":
        if isinstance(rasters, Mapping):
            rasters = rasters[bundle.reference_month]
        patches = np.stack([p for _, p in tile_to_patches(tile_spec, rasters)])
        probs_parts = []
        for start in range(0, len(patches), batch_size):
            batch = normalize_patch(patches[start : start + batch_size], bundle.stats)
            probs_parts.append(mono_forward(bundle.model, batch))
        probs = np.concatenate(probs_parts)
        label = f"month_{bundle.reference_month:02d}"
    else:
        if not isinstance(rasters, Mapping):
            raise ValueError("temporal maps need a mapping month -> tile raster")
        missing = [m for m in range(1, 13) if m not in rasters]
        if missing:
            raise ValueError(f"month {missing[0]} missing from tile rasters")
        assert bundle.encoder is not None and bundle.head is not None
        feature_dim = bundle.encoder.config.feature_dim
        sequences = np.zeros((n * n, 12, feature_dim), dtype=np.float32)
        with torch.no_grad():
            for j, month in enumerate(range(1, 13)):
                patches = np.stack([p for _, p in tile_to_patches(tile_spec, rasters[month])])
                for start in range(0, len(patches), batch_size):
                    batch = normalize_patch(patches[start : start + batch_size], bundle.stats)
                    t = torch.from_numpy(np.ascontiguousarray(batch)).permute(0, 3, 1, 2)
                    sequences[start : start + len(batch), j] = bundle.encoder.features(t).numpy()
        probs = temporal_forward(bundle.head, sequences)
        label = "annual"
    cardinality = bundle.level.cardinality
    return LulcMap(
        tile_id=tile_spec.tile_id,
        level_name=bundle.level.name.value,
        grid_n=n,
        cells=probs.argmax(axis=1).reshape(n, n).astype(np.int16),
        legend=_legend_for(bundle),
        label=label,
        dists=probs.reshape(n, n, cardinality),
    )


def change_detect(map_a: LulcMap, map_b: LulcMap, min_confidence: float = 0.5) -> ChangeMap:
    """Compare dominant classes cell by cell.

    Swapping the inputs swaps every (from, to) pair; a confidence floor of 0
    empties the uncertain set.
    """
    if map_a.tile_id != map_b.tile_id:
        raise ValueError(f"tile mismatch: {map_a.tile_id!r} vs {map_b.tile_id!r}")
    if map_a.level_name != map_b.level_name or map_a.legend != map_b.legend:
        raise ValueError("maps use different legends")
    if map_a.grid_n != map_b.grid_n:
        raise ValueError(f"grid mismatch: {map_a.grid_n} vs {map_b.grid_n}")
    differs = map_a.cells != map_b.cells
    if min_confidence > 0:
        confident = (map_a.dominant_confidence() >= min_confidence) & (
            map_b.dominant_confidence() >= min_confidence
        )
    else:
        confident = np.ones_like(differs, dtype=bool)
    changed = differs & confident
    uncertain = differs & ~confident
    pairs = np.full((map_a.grid_n, map_a.grid_n, 2), -1, dtype=np.int16)
    pairs[changed, 0] = map_a.cells[changed]
    pairs[changed, 1] = map_b.cells[changed]
    return ChangeMap(
        tile_id=map_a.tile_id,
        level_name=map_a.level_name,
        grid_n=map_a.grid_n,
        changed=changed,
        uncertain=uncertain,
        pairs=pairs,
        epochs=(map_a.label, map_b.label),
        min_confidence=min_confidence,
        legend=map_a.legend,
    )


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 1.0 for two empty masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _write_png(pixels: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(pixels, mode="RGB").save(path)


def render_map_png(lmap: LulcMap, path: str | Path, cell_px: int = 8) -> tuple[Path, Path]:
    """Render each cell as a solid color block; writes a legend sidecar too."""
    path = Path(path)
    colors = np.array(
        [PALETTE.get(entry["code"], (128, 128, 128)) for entry in lmap.legend], dtype=np.uint8
    )
    pixels = colors[lmap.cells]
    pixels = np.kron(pixels, np.ones((cell_px, cell_px, 1), dtype=np.uint8))
    _write_png(pixels, path)
    legend_path = path.with_suffix(".legend.json")
    legend_path.write_text(
        json.dumps(
            [
                {**dict(entry), "color": list(PALETTE.get(entry["code"], (128, 128, 128)))}
                for entry in lmap.legend
            ],
            indent=2,
        )
        + "\n"
    )
    return path, legend_path


def render_change_png(cmap: ChangeMap, path: str | Path, cell_px: int = 8) -> Path:
    path = Path(path)
    pixels = np.zeros((cmap.grid_n, cmap.grid_n, 3), dtype=np.uint8)
    pixels[:] = _CHANGE_COLORS["unchanged"]
    pixels[cmap.uncertain] = _CHANGE_COLORS["uncertain"]
    pixels[cmap.changed] = _CHANGE_COLORS["changed"]
    pixels = np.kron(pixels, np.ones((cell_px, cell_px, 1), dtype=np.uint8))
    _write_png(pixels, path)
    return path
