"""CORINE-derived land-cover class ontology.

Three granularities are shipped (5, 7 and 15 classes). Class ordering is
fixed alphabetically by CLC code so that label-vector indices are stable
across runs; the class lists live in a versioned JSON resource file so they
can be corrected without touching code. Everything here is immutable after
construction and safe for concurrent reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "Level",
    "ClassDef",
    "OntologyLevel",
    "AggregationMap",
    "LabelDistribution",
    "OntologyError",
    "build_level",
    "build_aggregation",
    "aggregate_distribution",
]

_ONTOLOGY_RESOURCE = "clc_ontology.json"
_EXPECTED_CARDINALITY = {"LEVEL1": 5, "LEVEL1_5": 7, "LEVEL2": 15}

# Label vectors whose mass is off by at most this much are renormalized by
# ``LabelDistribution.from_probs``; anything worse is treated as corruption.
SUM_TOLERANCE = 1e-6


class OntologyError(ValueError):
    """Invalid level, aggregation map, or label distribution."""


class Level(Enum):
    """The three supported class granularities, finest last."""

    LEVEL1 = "LEVEL1"
    LEVEL1_5 = "LEVEL1_5"
    LEVEL2 = "LEVEL2"

    @classmethod
    def parse(cls, name: "Level | str") -> "Level":
        if isinstance(name, Level):
            return name
        key = str(name).strip().upper().replace("LEVEL1.5", "LEVEL1_5").replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise OntologyError(f"unknown ontology level: {name!r}") from None


# Coarseness rank: LEVEL2 is the finest level, LEVEL1 the coarsest.
_COARSENESS = {Level.LEVEL2: 0, Level.LEVEL1_5: 1, Level.LEVEL1: 2}


@dataclass(frozen=True)
class ClassDef:
    """One land-cover class: CLC code, display name, parent at the next coarser level."""

    code: str
    name: str
    parent_code: str | None = None


@dataclass(frozen=True)
class OntologyLevel:
    """An ordered, fixed class set at one granularity."""

    name: Level
    classes: tuple[ClassDef, ...]

    def __post_init__(self) -> None:
        codes = [c.code for c in self.classes]
        if len(set(codes)) != len(codes):
            raise OntologyError(f"duplicate class codes in {self.name.value}: {codes}")
        if codes != sorted(codes):
            raise OntologyError(f"classes of {self.name.value} must be ordered by code")
        expected = _EXPECTED_CARDINALITY[self.name.value]
        if len(codes) != expected:
            raise OntologyError(
                f"{self.name.value} must have {expected} classes, got {len(codes)}"
            )

    @property
    def cardinality(self) -> int:
        return len(self.classes)

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(c.code for c in self.classes)

    def index_of(self, code: str) -> int:
        for i, c in enumerate(self.classes):
            if c.code == code:
                return i
        raise OntologyError(f"class code {code!r} not in {self.name.value}")

    def to_dict(self) -> dict:
        return {
            "level": self.name.value,
            "classes": [
                {"code": c.code, "name": c.name, "parent_code": c.parent_code}
                for c in self.classes
            ],
        }


@dataclass(frozen=True)
class AggregationMap:
    """A total map from every source class to exactly one coarser target class."""

    source: OntologyLevel
    target: OntologyLevel
    assignment: Mapping[str, str]

    def __post_init__(self) -> None:
        missing = [c for c in self.source.codes if c not in self.assignment]
        if missing:
            raise OntologyError(f"aggregation map misses source classes: {missing}")
        targets = set(self.assignment.values())
        unknown = targets - set(self.target.codes)
        if unknown:
            raise OntologyError(f"aggregation map hits unknown target classes: {unknown}")
        orphaned = set(self.target.codes) - targets
        if orphaned:
            raise OntologyError(f"target classes without a preimage: {sorted(orphaned)}")

    def groups(self) -> dict[str, tuple[int, ...]]:
        """Source-class indices per target code, in ascending source order."""
        out: dict[str, list[int]] = {code: [] for code in self.target.codes}
        for i, code in enumerate(self.source.codes):
            out[self.assignment[code]].append(i)
        return {code: tuple(idx) for code, idx in out.items()}

    def matrix(self) -> np.ndarray:
        """0/1 matrix of shape (target_cardinality, source_cardinality)."""
        m = np.zeros((self.target.cardinality, self.source.cardinality))
        for i, code in enumerate(self.source.codes):
            m[self.target.index_of(self.assignment[code]), i] = 1.0
        return m


@dataclass(frozen=True)
class LabelDistribution:
    """Probability vector over the classes of one ontology level."""

    level: OntologyLevel
    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (self.level.cardinality,):
            raise OntologyError(
                f"expected {self.level.cardinality} entries for "
                f"{self.level.name.value}, got shape {probs.shape}"
            )
        if not np.all(np.isfinite(probs)):
            raise OntologyError("label distribution contains non-finite entries")
        if np.any(probs < 0):
            raise OntologyError("label distribution contains negative entries")
        total = float(probs.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise OntologyError(f"label not a distribution (sum={total:.9g})")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_probs(cls, level: OntologyLevel, probs: Sequence[float]) -> "LabelDistribution":
        """Validate and, for mass errors within tolerance, renormalize."""
        arr = np.asarray(probs, dtype=np.float64)
        if arr.shape == (level.cardinality,) and np.all(np.isfinite(arr)) and np.all(arr >= 0):
            total = float(arr.sum())
            if abs(total - 1.0) > SUM_TOLERANCE:
                raise OntologyError(f"label not a distribution (sum={total:.9g})")
            if total != 1.0 and total > 0:
                arr = arr / total
        return cls(level, arr)

    @classmethod
    def uniform(cls, level: OntologyLevel) -> "LabelDistribution":
        return cls(level, np.full(level.cardinality, 1.0 / level.cardinality))

    @classmethod
    def one_hot(cls, level: OntologyLevel, code: str) -> "LabelDistribution":
        probs = np.zeros(level.cardinality)
        probs[level.index_of(code)] = 1.0
        return cls(level, probs)

    def present_codes(self) -> tuple[str, ...]:
        """Codes with strictly positive share."""
        return tuple(c.code for c, p in zip(self.level.classes, self.probs) if p > 0)


def _load_ontology_spec() -> dict:
    with resources.files("temporal_lulc.resources").joinpath(_ONTOLOGY_RESOURCE).open() as fh:
        return json.load(fh)


_ONTOLOGY_CACHE: dict[Level, OntologyLevel] = {}


def build_level(name: Level | str) -> OntologyLevel:
    """Return the canonical ordered class list for one granularity."""
    level = Level.parse(name)
    if level not in _ONTOLOGY_CACHE:
        spec = _load_ontology_spec()
        raw = spec["levels"][level.value]["classes"]
        classes = tuple(
            ClassDef(code=c["code"], name=c["name"], parent_code=c.get("parent_code"))
            for c in raw
        )
        _ONTOLOGY_CACHE[level] = OntologyLevel(name=level, classes=classes)
    return _ONTOLOGY_CACHE[level]


def _coerce_level(value: OntologyLevel | Level | str) -> OntologyLevel:
    if isinstance(value, OntologyLevel):
        return value
    return build_level(value)


def build_aggregation(
    source: OntologyLevel | Level | str, target: OntologyLevel | Level | str
) -> AggregationMap:
    """Build the partition map from a finer level onto a strictly coarser one."""
    src = _coerce_level(source)
    tgt = _coerce_level(target)
    if _COARSENESS[tgt.name] <= _COARSENESS[src.name]:
        raise OntologyError(
            f"target {tgt.name.value} is not strictly coarser than source {src.name.value}"
        )
    # Walk parent codes one coarseness rank at a time until the target level.
    chain = [Level.LEVEL2, Level.LEVEL1_5, Level.LEVEL1]
    assignment: dict[str, str] = {}
    for cls in src.classes:
        code: str | None = cls.code
        rank = _COARSENESS[src.name]
        current = cls
        while rank < _COARSENESS[tgt.name]:
            code = current.parent_code
            if code is None:
                raise OntologyError(f"class {cls.code!r} has no parent above {src.name.value}")
            rank += 1
            current = next(c for c in build_level(chain[rank]).classes if c.code == code)
        assignment[cls.code] = current.code
    return AggregationMap(source=src, target=tgt, assignment=assignment)


def aggregate_distribution(d: LabelDistribution, amap: AggregationMap) -> LabelDistribution:
    """Sum each target entry over its source preimage.

    Summation runs in ascending source-class order, which makes single-step
    and composed aggregation bit-identical and keeps total mass unchanged.
    """
    if d.level.name is not amap.source.name:
        raise OntologyError(
            f"distribution at {d.level.name.value} cannot be aggregated with a map "
            f"from {amap.source.name.value}"
        )
    out = np.zeros(amap.target.cardinality)
    groups = amap.groups()
    for j, code in enumerate(amap.target.codes):
        acc = 0.0
        for i in groups[code]:
            acc += float(d.probs[i])
        out[j] = acc
    return LabelDistribution(amap.target, out)
