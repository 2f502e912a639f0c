"""Deterministic synthetic seasonal-raster corpus.

Each land-cover class is rendered from an annual reflectance curve per
channel (R, G, B, N): ``value(month) = base + amp * sin(2*pi*(month-6)/12)``
plus Gaussian pixel noise. Two "seasonal twin" pairs share a base and carry
opposite-sign seasonal amplitudes, so their appearance at month 6 is exactly
identical while their annual trajectories diverge: only a temporal model can
separate them. One twin pair (arable land / permanent crops) merges already
at the 7-class level, the other (forests / scrubs) only at the 5-class
level, which makes coarser evaluation progressively easier.

Tiles are painted as Voronoi regions of whole patch cells; cells optionally
receive a sub-rectangle of a second class, and each patch's ground-truth
distribution is computed from the painted pixel counts, so labels equal area
fractions exactly. Everything is driven by per-(tile, month) seeded RNG
streams: the same seed yields byte-identical corpora.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import MONTHS, DatasetMeta, PatchRecord, TileSpec, save_manifest
from .ontology import LabelDistribution, Level, build_level
from .rasters import write_raw_raster

__all__ = [
    "SynthConfig",
    "SynthResult",
    "ChangePair",
    "TWIN_PAIRS",
    "class_signatures",
    "dominant_grid",
    "generate_synthetic_corpus",
    "generate_change_pair",
]

# (base RGBN, seasonal amplitude RGBN) per LEVEL2 class code.
_SIGNATURE_TABLE: dict[str, tuple[tuple[float, ...], tuple[float, ...]]] = {
    "11": ((0.55, 0.50, 0.48, 0.30), (0.0, 0.0, 0.0, 0.0)),
    "12": ((0.72, 0.66, 0.68, 0.22), (0.0, 0.0, 0.0, 0.0)),
    "13": ((0.62, 0.47, 0.33, 0.18), (0.0, 0.0, 0.0, 0.0)),
    "14": ((0.33, 0.56, 0.30, 0.44), (0.0, 0.03, 0.0, 0.06)),
    "21": ((0.40, 0.45, 0.25, 0.50), (0.0, 0.10, 0.0, 0.25)),
    "22": ((0.40, 0.45, 0.25, 0.50), (0.0, -0.10, 0.0, -0.25)),
    "23": ((0.28, 0.60, 0.24, 0.62), (0.0, 0.04, 0.0, 0.08)),
    "24": ((0.46, 0.51, 0.31, 0.42), (0.0, 0.05, 0.0, 0.12)),
    "31": ((0.16, 0.38, 0.18, 0.56), (0.0, 0.08, 0.0, 0.20)),
    "32": ((0.16, 0.38, 0.18, 0.56), (0.0, -0.08, 0.0, -0.20)),
    "33": ((0.60, 0.55, 0.42, 0.36), (0.0, 0.0, 0.0, 0.0)),
    "41": ((0.24, 0.36, 0.40, 0.42), (0.0, 0.03, 0.02, 0.05)),
    "42": ((0.30, 0.40, 0.50, 0.30), (0.0, 0.02, 0.03, 0.04)),
    "51": ((0.08, 0.13, 0.30, 0.06), (0.0, 0.0, 0.0, 0.0)),
    "52": ((0.04, 0.09, 0.36, 0.03), (0.0, 0.0, 0.0, 0.0)),
}

#: Class-code pairs that are pixel-identical at the twin month.
TWIN_PAIRS: tuple[tuple[str, str], ...] = (("21", "22"), ("31", "32"))

#: Month at which the twin pairs coincide (seasonal term crosses zero).
TWIN_MONTH = 6

# Twin classes get extra painting weight so the temporal signal carries a
# meaningful share of the corpus mass.
_DEFAULT_CLASS_WEIGHTS = {"21": 3.0, "22": 3.0, "31": 3.0, "32": 3.0}


def class_signatures() -> np.ndarray:
    """Annual reflectance curves, shape (n_classes, 12, 4), float32."""
    level = build_level(Level.LEVEL2)
    sig = np.zeros((level.cardinality, len(MONTHS), 4), dtype=np.float64)
    for i, code in enumerate(level.codes):
        base, amp = _SIGNATURE_TABLE[code]
        for j, month in enumerate(MONTHS):
            season = np.sin(2.0 * np.pi * (month - TWIN_MONTH) / 12.0)
            sig[i, j] = np.asarray(base) + np.asarray(amp) * season
    return sig.astype(np.float32)


@dataclass
class SynthConfig:
    """Parameters of the synthetic corpus generator."""

    tiles: int = 10
    grid_n: int = 40
    patch_px: int = 32
    seed: int = 0
    noise_sigma: float = 0.03
    mix_prob: float = 0.5
    same_group_mix_prob: float = 0.7
    region_seeds: int | None = None
    active_classes: tuple[str, ...] | None = None
    class_weights: Mapping[str, float] | None = None

    def __post_init__(self) -> None:
        if self.tiles < 1:
            raise ValueError("tiles must be >= 1")
        if self.grid_n < 1:
            raise ValueError("grid_n must be >= 1")
        if self.patch_px < 2:
            raise ValueError("patch_px must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.mix_prob <= 1.0:
            raise ValueError("mix_prob must be within [0, 1]")
        level = build_level(Level.LEVEL2)
        if self.active_classes is not None:
            self.active_classes = tuple(self.active_classes)
            if not self.active_classes:
                raise ValueError("active_classes must name at least one class")
            unknown = set(self.active_classes) - set(level.codes)
            if unknown:
                raise ValueError(f"unknown class codes: {sorted(unknown)}")


@dataclass
class SynthResult:
    manifest_path: Path
    meta: DatasetMeta
    tile_dirs: tuple[Path, ...]
    records: list[PatchRecord]


@dataclass
class ChangePair:
    """Two renderings of one tile with a known repainted patch region."""

    dir_a: Path
    dir_b: Path
    tile_spec: TileSpec
    change_mask: np.ndarray  # (grid_n, grid_n) bool
    region: tuple[int, int, int, int]  # r0, r1, c0, c1, half-open in grid cells
    to_code: str
    months: tuple[int, ...] = MONTHS

    def month_paths(self, which: str) -> dict[int, Path]:
        base = self.dir_a if which == "a" else self.dir_b
        return {m: base / f"month_{m:02d}.tlc" for m in self.months}


def _active_indices(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    level = build_level(Level.LEVEL2)
    codes = cfg.active_classes or level.codes
    idx = np.array([level.index_of(c) for c in codes], dtype=np.int64)
    weights_map = dict(cfg.class_weights) if cfg.class_weights else dict(_DEFAULT_CLASS_WEIGHTS)
    weights = np.array([weights_map.get(c, 1.0) for c in codes], dtype=np.float64)
    return idx, weights / weights.sum()


def _l1_groups() -> dict[int, list[int]]:
    """LEVEL2 class indices grouped by their LEVEL1 parent."""
    from .ontology import build_aggregation

    amap = build_aggregation(Level.LEVEL2, Level.LEVEL1)
    groups: dict[str, list[int]] = {}
    for i, code in enumerate(amap.source.codes):
        groups.setdefault(amap.assignment[code], []).append(i)
    return {j: v for j, v in enumerate(groups[c] for c in amap.target.codes)}


def paint_tile(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Paint one tile: per-pixel LEVEL2 class indices, shape (side, side)."""
    active_idx, weights = _active_indices(cfg)
    side = cfg.grid_n * cfg.patch_px
    p = cfg.patch_px
    n_seeds = cfg.region_seeds or max(4, cfg.grid_n)
    seed_rc = rng.uniform(0.0, cfg.grid_n, size=(n_seeds, 2))
    seed_cls = rng.choice(active_idx, size=n_seeds, p=weights)

    group_of = {}
    for gi, members in _l1_groups().items():
        for m in members:
            group_of[m] = gi
    groups = _l1_groups()
    active_set = set(int(i) for i in active_idx)

    paint = np.empty((side, side), dtype=np.int16)
    for r in range(cfg.grid_n):
        for c in range(cfg.grid_n):
            center = np.array([r + 0.5, c + 0.5])
            distances = np.square(seed_rc - center).sum(axis=1)
            primary = int(seed_cls[int(np.argmin(distances))])
            cell = paint[r * p : (r + 1) * p, c * p : (c + 1) * p]
            cell[:] = primary
            if rng.random() >= cfg.mix_prob:
                continue
            siblings = [
                i for i in groups[group_of[primary]] if i != primary and i in active_set
            ]
            others = [int(i) for i in active_idx if i != primary]
            if siblings and rng.random() < cfg.same_group_mix_prob:
                secondary = int(rng.choice(siblings))
            elif others:
                secondary = int(rng.choice(others))
            else:
                continue
            half = p // 2
            if rng.random() < 0.5:  # quadrant, ~1/4 of the cell
                r0 = half if rng.random() < 0.5 else 0
                c0 = half if rng.random() < 0.5 else 0
                cell[r0 : r0 + half, c0 : c0 + half] = secondary
            else:  # half of the cell
                if rng.random() < 0.5:
                    cell[:half, :] = secondary
                else:
                    cell[:, :half] = secondary
    return paint


def render_month(
    paint: np.ndarray,
    month: int,
    noise_sigma: float,
    rng: np.random.Generator,
    signatures: np.ndarray | None = None,
) -> np.ndarray:
    """Render one month of a painted tile as an (H, W, 4) float32 raster."""
    sig = signatures if signatures is not None else class_signatures()
    month_idx = MONTHS.index(month)
    raster = sig[:, month_idx, :][paint].astype(np.float32)
    if noise_sigma > 0:
        raster = raster + rng.normal(0.0, noise_sigma, raster.shape).astype(np.float32)
    return raster


def patch_labels(paint: np.ndarray, grid_n: int, patch_px: int) -> np.ndarray:
    """Exact painted-area fractions per cell, shape (grid_n, grid_n, n_classes)."""
    n_classes = build_level(Level.LEVEL2).cardinality
    out = np.zeros((grid_n, grid_n, n_classes), dtype=np.float64)
    p = patch_px
    for r in range(grid_n):
        for c in range(grid_n):
            counts = np.bincount(
                paint[r * p : (r + 1) * p, c * p : (c + 1) * p].ravel(), minlength=n_classes
            )
            out[r, c] = counts / float(p * p)
    return out


def dominant_grid(paint: np.ndarray, grid_n: int, patch_px: int) -> np.ndarray:
    """Per-cell dominant class index, shape (grid_n, grid_n)."""
    labels = patch_labels(paint, grid_n, patch_px)
    return labels.argmax(axis=2).astype(np.int16)


def _tile_records(
    tile_id: str, rel_dir: str, labels: np.ndarray, months: Sequence[int]
) -> list[PatchRecord]:
    level = build_level(Level.LEVEL2)
    records = []
    grid_n = labels.shape[0]
    month_paths = {m: f"{rel_dir}/month_{m:02d}.tlc" for m in months}
    for r in range(grid_n):
        for c in range(grid_n):
            records.append(
                PatchRecord(
                    patch_id=f"{tile_id}_r{r:03d}c{c:03d}",
                    tile_id=tile_id,
                    row=r,
                    col=c,
                    months=dict(month_paths),
                    label=LabelDistribution.from_probs(level, labels[r, c]),
                )
            )
    return records


def generate_synthetic_corpus(cfg: SynthConfig, out_dir: str | Path) -> SynthResult:
    """Write tiles, paint maps, manifest and meta under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    signatures = class_signatures()
    records: list[PatchRecord] = []
    tile_dirs = []
    tile_ids = []
    for t in range(cfg.tiles):
        tile_id = f"tile_{t:03d}"
        tile_dir = out_dir / "tiles" / tile_id
        tile_dir.mkdir(parents=True, exist_ok=True)
        paint = paint_tile(cfg, np.random.default_rng([cfg.seed, t, 0]))
        np.save(tile_dir / "paint.npy", paint)
        for m in MONTHS:
            raster = render_month(
                paint, m, cfg.noise_sigma, np.random.default_rng([cfg.seed, t, m]), signatures
            )
            write_raw_raster(tile_dir / f"month_{m:02d}.tlc", raster)
        labels = patch_labels(paint, cfg.grid_n, cfg.patch_px)
        records.extend(_tile_records(tile_id, f"tiles/{tile_id}", labels, MONTHS))
        tile_dirs.append(tile_dir)
        tile_ids.append(tile_id)
    manifest_path = save_manifest(records, out_dir / "manifest.jsonl")
    meta = DatasetMeta(
        grid_n=cfg.grid_n,
        patch_px=cfg.patch_px,
        months=MONTHS,
        level=Level.LEVEL2.value,
        seed=cfg.seed,
        tile_ids=tuple(tile_ids),
        noise_sigma=cfg.noise_sigma,
    )
    meta.save(out_dir / "meta.json")
    return SynthResult(
        manifest_path=manifest_path,
        meta=meta,
        tile_dirs=tuple(tile_dirs),
        records=records,
    )


def generate_change_pair(
    cfg: SynthConfig,
    out_dir: str | Path,
    region: tuple[int, int, int, int] | None = None,
    to_code: str | None = None,
) -> ChangePair:
    """Render one tile twice with a known patch region repainted in between.

    The repainted cells become pure (single-class) so post-classification
    change detection sees confident dominants; the ground-truth change mask
    is derived from the two paint maps.
    """
    out_dir = Path(out_dir)
    level = build_level(Level.LEVEL2)
    signatures = class_signatures()
    rng = np.random.default_rng([cfg.seed, 0, 0])
    paint_a = paint_tile(cfg, rng)

    g = cfg.grid_n
    if region is None:
        h = max(1, round(g * 0.4))
        r0 = int(rng.integers(0, g - h + 1))
        c0 = int(rng.integers(0, g - h + 1))
        region = (r0, r0 + h, c0, c0 + h)
    r0, r1, c0, c1 = region
    if not (0 <= r0 < r1 <= g and 0 <= c0 < c1 <= g):
        raise ValueError(f"region {region} outside the {g}x{g} grid")

    dom_a = dominant_grid(paint_a, g, cfg.patch_px)
    if to_code is None:
        active = cfg.active_classes or level.codes
        present = {level.codes[i] for i in np.unique(dom_a[r0:r1, c0:c1])}
        candidates = sorted(set(active) - present)
        if not candidates:
            candidates = sorted(active)
        to_code = str(rng.choice(candidates))
    to_idx = level.index_of(to_code)

    paint_b = paint_a.copy()
    p = cfg.patch_px
    paint_b[r0 * p : r1 * p, c0 * p : c1 * p] = to_idx
    dom_b = dominant_grid(paint_b, g, cfg.patch_px)
    mask = dom_a != dom_b

    for name, paint, stream in (("tile_a", paint_a, 10), ("tile_b", paint_b, 20)):
        tile_dir = out_dir / name
        tile_dir.mkdir(parents=True, exist_ok=True)
        np.save(tile_dir / "paint.npy", paint)
        for m in MONTHS:
            raster = render_month(
                paint, m, cfg.noise_sigma, np.random.default_rng([cfg.seed, stream, m]), signatures
            )
            write_raw_raster(tile_dir / f"month_{m:02d}.tlc", raster)

    np.save(out_dir / "change_mask.npy", mask)
    (out_dir / "change.json").write_text(
        json.dumps(
            {
                "region": list(region),
                "to_class": to_code,
                "changed_cells": int(mask.sum()),
                "grid_n": g,
            },
            indent=2,
        )
        + "\n"
    )
    tile_spec = TileSpec(tile_id="change_pair", grid_n=g, patch_px=p)
    return ChangePair(
        dir_a=out_dir / "tile_a",
        dir_b=out_dir / "tile_b",
        tile_spec=tile_spec,
        change_mask=mask,
        region=region,
        to_code=to_code,
    )
