"""Dataset plumbing: manifest ingestion, tile decomposition, patch loading,
and class-distribution-preserving splits.

A manifest is JSON-lines, one patch per line:

    {"patch_id": str, "tile_id": str, "row": int, "col": int,
     "months": {"1": path, ..., "12": path},
     "label": {"level": "LEVEL2", "probs": [15 floats]}}

Month paths are resolved relative to the manifest file. They may point either
at patch-sized rasters or at whole-tile rasters; in the latter case the patch
is cropped out using its grid position, which needs the grid geometry from
the dataset's ``meta.json`` (written by the synthetic generator) or an
explicit :class:`TileSpec`.
"""

from __future__ import annotations

import json
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ontology import LabelDistribution, Level, OntologyError, build_level
from .rasters import read_raster, resample_raster

__all__ = [
    "MONTHS",
    "ManifestError",
    "TileSpec",
    "PatchRecord",
    "DatasetMeta",
    "DatasetSplit",
    "load_manifest",
    "save_manifest",
    "tile_to_patches",
    "reassemble_patches",
    "stratified_split",
    "PatchLoader",
]

MONTHS: tuple[int, ...] = tuple(range(1, 13))
META_FILENAME = "meta.json"


class ManifestError(ValueError):
    """Malformed manifest content; the message names line and field."""


@dataclass(frozen=True)
class TileSpec:
    """Geometry of one tile and its patch grid."""

    tile_id: str
    extent_m: float = 8000.0
    grid_n: int = 40
    patch_px: int = 64

    def __post_init__(self) -> None:
        if self.grid_n < 1:
            raise ValueError("grid_n must be >= 1")
        if self.patch_px < 1:
            raise ValueError("patch_px must be >= 1")
        if self.extent_m <= 0:
            raise ValueError("extent_m must be positive")

    @property
    def patch_count(self) -> int:
        return self.grid_n * self.grid_n

    @property
    def patch_ground_m(self) -> float:
        return self.extent_m / self.grid_n


@dataclass
class PatchRecord:
    """One geolocated patch: monthly raster references plus its ground truth."""

    patch_id: str
    tile_id: str
    row: int
    col: int
    months: dict[int, str]
    label: LabelDistribution

    def missing_months(self, months: Sequence[int] = MONTHS) -> tuple[int, ...]:
        return tuple(m for m in months if m not in self.months)


@dataclass
class DatasetMeta:
    """Grid geometry and provenance written alongside a generated manifest."""

    grid_n: int
    patch_px: int
    months: tuple[int, ...] = MONTHS
    level: str = "LEVEL2"
    seed: int | None = None
    tile_ids: tuple[str, ...] = ()
    noise_sigma: float | None = None

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {
            "grid_n": self.grid_n,
            "patch_px": self.patch_px,
            "months": list(self.months),
            "level": self.level,
            "seed": self.seed,
            "tile_ids": list(self.tile_ids),
            "noise_sigma": self.noise_sigma,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetMeta":
        raw = json.loads(Path(path).read_text())
        return cls(
            grid_n=int(raw["grid_n"]),
            patch_px=int(raw["patch_px"]),
            months=tuple(int(m) for m in raw.get("months", MONTHS)),
            level=str(raw.get("level", "LEVEL2")),
            seed=raw.get("seed"),
            tile_ids=tuple(raw.get("tile_ids", ())),
            noise_sigma=raw.get("noise_sigma"),
        )

    @classmethod
    def find_for_manifest(cls, manifest_path: str | Path) -> "DatasetMeta | None":
        candidate = Path(manifest_path).parent / META_FILENAME
        return cls.load(candidate) if candidate.exists() else None


def _require(obj: dict, key: str, line_no: int):
    if key not in obj:
        raise ManifestError(f"line {line_no}: missing field '{key}'")
    return obj[key]


def load_manifest(path: str | Path, strict: bool = False) -> list[PatchRecord]:
    """Parse a JSON-lines manifest into validated records.

    With ``strict`` every referenced raster path (resolved against the
    manifest directory) must exist.
    """
    path = Path(path)
    records: list[PatchRecord] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            patch_id = str(_require(obj, "patch_id", line_no))
            tile_id = str(_require(obj, "tile_id", line_no))
            try:
                row = int(_require(obj, "row", line_no))
                col = int(_require(obj, "col", line_no))
            except (TypeError, ValueError):
                raise ManifestError(f"line {line_no}: field 'row'/'col' must be integers") from None
            if row < 0 or col < 0:
                raise ManifestError(f"line {line_no}: field 'row'/'col' must be non-negative")
            months_raw = _require(obj, "months", line_no)
            if not isinstance(months_raw, dict) or not months_raw:
                raise ManifestError(f"line {line_no}: field 'months' must be a non-empty object")
            months: dict[int, str] = {}
            for k, v in months_raw.items():
                try:
                    m = int(k)
                except ValueError:
                    raise ManifestError(
                        f"line {line_no}: field 'months' has non-integer key {k!r}"
                    ) from None
                if not 1 <= m <= 12:
                    raise ManifestError(f"line {line_no}: field 'months' key {m} outside 1..12")
                months[m] = str(v)
            label_raw = _require(obj, "label", line_no)
            if not isinstance(label_raw, dict):
                raise ManifestError(f"line {line_no}: field 'label' must be an object")
            try:
                level = build_level(Level.parse(label_raw.get("level", "LEVEL2")))
                label = LabelDistribution.from_probs(level, label_raw.get("probs", ()))
            except OntologyError as exc:
                raise ManifestError(f"line {line_no}: field 'label': {exc}") from None
            records.append(
                PatchRecord(
                    patch_id=patch_id,
                    tile_id=tile_id,
                    row=row,
                    col=col,
                    months=months,
                    label=label,
                )
            )
    if strict:
        base = path.parent
        missing = sorted(
            {
                rec.patch_id
                for rec in records
                for p in rec.months.values()
                if not (base / p).exists()
            }
        )
        if missing:
            raise ManifestError(
                f"missing rasters for {len(missing)} patches: {', '.join(missing[:20])}"
                + ("..." if len(missing) > 20 else "")
            )
    return records


def save_manifest(records: Iterable[PatchRecord], path: str | Path) -> Path:
    """Write records in the JSON-lines manifest schema."""
    path = Path(path)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "patch_id": rec.patch_id,
                        "tile_id": rec.tile_id,
                        "row": rec.row,
                        "col": rec.col,
                        "months": {str(m): p for m, p in sorted(rec.months.items())},
                        "label": {
                            "level": rec.label.level.name.value,
                            "probs": [float(p) for p in rec.label.probs],
                        },
                    }
                )
                + "\n"
            )
    return path


def tile_to_patches(
    tile: TileSpec, raster: np.ndarray
) -> list[tuple[tuple[int, int], np.ndarray]]:
    """Split a tile raster into its grid_n x grid_n patches, row-major.

    The decomposition is a partition: patches are disjoint and concatenating
    them reproduces the tile exactly.
    """
    arr = np.asarray(raster)
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W, C) raster, got shape {arr.shape}")
    h, w = arr.shape[:2]
    n = tile.grid_n
    if h % n or w % n:
        raise ValueError(
            f"raster {h}x{w} is not divisible by grid_n={n}; pad or resample to "
            f"({(h // n + 1) * n}, {(w // n + 1) * n}) or the nearest multiple first"
        )
    ph, pw = h // n, w // n
    out = []
    for r in range(n):
        for c in range(n):
            out.append(((r, c), arr[r * ph : (r + 1) * ph, c * pw : (c + 1) * pw].copy()))
    return out


def reassemble_patches(
    patches: Sequence[tuple[tuple[int, int], np.ndarray]], grid_n: int
) -> np.ndarray:
    """Inverse of :func:`tile_to_patches`."""
    if not patches:
        raise ValueError("no patches to reassemble")
    ph, pw = patches[0][1].shape[:2]
    channels = patches[0][1].shape[2]
    out = np.zeros((grid_n * ph, grid_n * pw, channels), dtype=patches[0][1].dtype)
    for (r, c), patch in patches:
        out[r * ph : (r + 1) * ph, c * pw : (c + 1) * pw] = patch
    return out


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint, exhaustive train/val/test patch-id sets."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    fractions: tuple[float, float, float] = (0.7, 0.2, 0.1)

    def __post_init__(self) -> None:
        sets = [set(self.train), set(self.val), set(self.test)]
        total = len(self.train) + len(self.val) + len(self.test)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise ValueError("split parts are not pairwise disjoint")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.val), len(self.test))

    def subset(self, records: Sequence[PatchRecord], part: str) -> list[PatchRecord]:
        ids = set(getattr(self, part))
        return [r for r in records if r.patch_id in ids]

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "fractions": list(self.fractions),
        }


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    raw = [total * f for f in fractions]
    base = [int(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (raw[i] - base[i], -i), reverse=True)
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def stratified_split(
    records: Sequence[PatchRecord],
    fractions: tuple[float, float, float] = (0.7, 0.2, 0.1),
    seed: int = 0,
    tolerance: float = 0.02,
) -> DatasetSplit:
    """Split records so each part preserves the corpus class-mass profile.

    Records are grouped by dominant class, shuffled deterministically, and
    dealt out proportionally; overall part sizes are then balanced to within
    one patch of the fraction targets. If any per-class mass fraction of a
    part drifts more than ``tolerance`` (absolute) from the corpus-wide
    profile, a warning is emitted and the best-effort split is returned.
    """
    if any(f <= 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(records)
    rng = np.random.default_rng(seed)
    targets = _largest_remainder(n, fractions)

    groups: dict[int, list[int]] = {}
    for idx, rec in enumerate(records):
        dom = int(np.argmax(rec.label.probs))
        groups.setdefault(dom, []).append(idx)

    parts: list[list[int]] = [[], [], []]
    for dom in sorted(groups):
        members = groups[dom]
        perm = rng.permutation(len(members))
        shuffled = [members[i] for i in perm]
        quotas = _largest_remainder(len(shuffled), fractions)
        start = 0
        for part_idx, q in enumerate(quotas):
            parts[part_idx].extend(shuffled[start : start + q])
            start += q

    # Per-group rounding can leave overall sizes off target; move single
    # records from over-full to under-full parts, largest donor group first.
    def group_of(idx: int) -> int:
        return int(np.argmax(records[idx].label.probs))

    while [len(p) for p in parts] != targets:
        over = next(i for i in range(3) if len(parts[i]) > targets[i])
        under = next(i for i in range(3) if len(parts[i]) < targets[i])
        counts: dict[int, int] = {}
        for idx in parts[over]:
            counts[group_of(idx)] = counts.get(group_of(idx), 0) + 1
        donor_group = max(sorted(counts), key=lambda g: counts[g])
        pos = max(i for i, idx in enumerate(parts[over]) if group_of(idx) == donor_group)
        parts[under].append(parts[over].pop(pos))

    split = DatasetSplit(
        train=tuple(records[i].patch_id for i in parts[0]),
        val=tuple(records[i].patch_id for i in parts[1]),
        test=tuple(records[i].patch_id for i in parts[2]),
        fractions=tuple(fractions),
    )

    if n:
        cardinality = records[0].label.level.cardinality
        corpus_mass = np.zeros(cardinality)
        for rec in records:
            corpus_mass += rec.label.probs
        corpus_frac = corpus_mass / n
        for name, part in zip(("train", "val", "test"), parts):
            if not part:
                continue
            mass = np.zeros(cardinality)
            for i in part:
                mass += records[i].label.probs
            drift = np.abs(mass / len(part) - corpus_frac).max()
            if drift > tolerance:
                warnings.warn(
                    f"best-effort split: '{name}' class mass deviates by "
                    f"{drift:.4f} (> {tolerance}) from the corpus profile",
                    stacklevel=2,
                )
    return split


class PatchLoader:
    """Reads the per-month pixels of manifest records.

    Tile-sized rasters are cropped with the record's grid position; the grid
    geometry comes from ``meta`` (or explicit ``grid_n``/``patch_px``). A
    small LRU cache keeps recently used tile rasters in memory, so iterating
    records month-by-month avoids rereading files. Loading is read-only and
    safe to parallelize across workers.
    """

    def __init__(
        self,
        base_dir: str | Path,
        meta: DatasetMeta | None = None,
        grid_n: int | None = None,
        patch_px: int | None = None,
        resample_to: int | None = None,
        cache_size: int = 16,
    ) -> None:
        self.base_dir = Path(base_dir)
        self.grid_n = grid_n if grid_n is not None else (meta.grid_n if meta else None)
        self.patch_px = patch_px if patch_px is not None else (meta.patch_px if meta else None)
        self.resample_to = resample_to
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()
        self._cache_size = cache_size

    @classmethod
    def for_manifest(cls, manifest_path: str | Path, **kwargs) -> "PatchLoader":
        manifest_path = Path(manifest_path)
        meta = DatasetMeta.find_for_manifest(manifest_path)
        return cls(manifest_path.parent, meta=meta, **kwargs)

    def _read(self, rel_path: str) -> np.ndarray:
        cached = self._cache.get(rel_path)
        if cached is not None:
            self._cache.move_to_end(rel_path)
            return cached
        arr = np.asarray(read_raster(self.base_dir / rel_path), dtype=np.float32)
        self._cache[rel_path] = arr
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return arr

    def load_patch(self, record: PatchRecord, month: int) -> np.ndarray:
        """Return the (patch_px, patch_px, C) pixels of one record-month."""
        if month not in record.months:
            raise ValueError(f"patch {record.patch_id}: month {month} missing")
        arr = self._read(record.months[month])
        h, w = arr.shape[:2]
        if self.grid_n and self.patch_px and (h, w) == (
            self.grid_n * self.patch_px,
            self.grid_n * self.patch_px,
        ):
            if not (record.row < self.grid_n and record.col < self.grid_n):
                raise ValueError(
                    f"patch {record.patch_id}: grid position ({record.row}, {record.col}) "
                    f"outside {self.grid_n}x{self.grid_n} grid"
                )
            p = self.patch_px
            patch = arr[
                record.row * p : (record.row + 1) * p,
                record.col * p : (record.col + 1) * p,
            ].copy()
        elif self.patch_px and (h, w) == (self.patch_px, self.patch_px):
            patch = arr.copy()
        elif self.patch_px:
            raise ValueError(
                f"patch {record.patch_id}: raster is {h}x{w}, expected patch size "
                f"{self.patch_px} or tile size {self.grid_n}x{self.patch_px} per side; "
                f"check the dataset meta.json"
            )
        else:
            patch = arr.copy()
        if self.resample_to and patch.shape[:2] != (self.resample_to, self.resample_to):
            patch = resample_raster(patch, self.resample_to)
        return patch

    def load_month(self, records: Sequence[PatchRecord], month: int) -> np.ndarray:
        """Stack one month of several records into an (N, p, p, C) array."""
        return np.stack([self.load_patch(rec, month) for rec in records])
