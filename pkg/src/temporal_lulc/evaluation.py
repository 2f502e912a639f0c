"""Label-set extraction and micro / per-class F1.

Distributions carry shares, not binary presence, so a binarization rule is
needed before F1 can be counted: ground truth marks a class present when its
share is strictly positive; predictions mark it present when the predicted
probability reaches the threshold tau (default 0.1). Both choices are
configurable, and :func:`sweep_tau` reports the metric's sensitivity.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import PatchLoader, PatchRecord
from .models import ArtifactBundle, predict_probs
from .ontology import (
    Level,
    OntologyError,
    OntologyLevel,
    build_aggregation,
    build_level,
)

__all__ = [
    "ThresholdRule",
    "EvalReport",
    "predicted_label_set",
    "truth_label_set",
    "micro_counts",
    "micro_f1",
    "per_class_counts",
    "per_class_f1",
    "report_from_probs",
    "evaluate_model",
    "sweep_tau",
]

_COARSENESS = {Level.LEVEL2: 0, Level.LEVEL1_5: 1, Level.LEVEL1: 2}


@dataclass(frozen=True)
class ThresholdRule:
    """Presence threshold applied to predicted distributions."""

    tau: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")


def predicted_label_set(probs: np.ndarray, rule: ThresholdRule) -> frozenset[int]:
    """Class indices whose predicted probability reaches tau."""
    arr = np.asarray(probs)
    return frozenset(int(i) for i in np.flatnonzero(arr >= rule.tau))


def truth_label_set(probs: np.ndarray) -> frozenset[int]:
    """Class indices with strictly positive ground-truth share."""
    arr = np.asarray(probs)
    return frozenset(int(i) for i in np.flatnonzero(arr > 0))


def micro_counts(
    pred_sets: Sequence[frozenset[int]], true_sets: Sequence[frozenset[int]]
) -> tuple[int, int, int]:
    """(TP, FP, FN) summed over all (patch, class) pairs."""
    if len(pred_sets) != len(true_sets):
        raise ValueError(
            f"length mismatch: {len(pred_sets)} predictions vs {len(true_sets)} truths"
        )
    tp = fp = fn = 0
    for pred, true in zip(pred_sets, true_sets):
        tp += len(pred & true)
        fp += len(pred - true)
        fn += len(true - pred)
    return tp, fp, fn


def micro_f1(
    pred_sets: Sequence[frozenset[int]], true_sets: Sequence[frozenset[int]]
) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both sides are entirely empty."""
    tp, fp, fn = micro_counts(pred_sets, true_sets)
    if tp == fp == fn == 0:
        warnings.warn("degenerate micro-F1: no labels on either side, reporting 1.0", stacklevel=2)
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def per_class_counts(
    pred_sets: Sequence[frozenset[int]],
    true_sets: Sequence[frozenset[int]],
    n_classes: int,
) -> dict[int, tuple[int, int, int]]:
    """Per-class (TP, FP, FN); classes never present nor predicted are absent."""
    if len(pred_sets) != len(true_sets):
        raise ValueError(
            f"length mismatch: {len(pred_sets)} predictions vs {len(true_sets)} truths"
        )
    tp = np.zeros(n_classes, dtype=np.int64)
    fp = np.zeros(n_classes, dtype=np.int64)
    fn = np.zeros(n_classes, dtype=np.int64)
    for pred, true in zip(pred_sets, true_sets):
        for c in pred & true:
            tp[c] += 1
        for c in pred - true:
            fp[c] += 1
        for c in true - pred:
            fn[c] += 1
    return {
        c: (int(tp[c]), int(fp[c]), int(fn[c]))
        for c in range(n_classes)
        if tp[c] + fp[c] + fn[c] > 0
    }


def per_class_f1(
    pred_sets: Sequence[frozenset[int]],
    true_sets: Sequence[frozenset[int]],
    n_classes: int,
) -> dict[int, float]:
    return {
        c: 2 * tp / (2 * tp + fp + fn)
        for c, (tp, fp, fn) in per_class_counts(pred_sets, true_sets, n_classes).items()
    }


@dataclass
class EvalReport:
    """Micro and per-class F1 at one ontology level, with raw counts."""

    level_name: str
    micro_f1: float
    per_class_f1: dict[str, float]
    counts: dict[str, dict[str, int]]
    n_patches: int
    tau: float

    def micro_from_counts(self) -> float:
        """Recompute the scalar from the stored counts (consistency check)."""
        tp = sum(c["tp"] for c in self.counts.values())
        fp = sum(c["fp"] for c in self.counts.values())
        fn = sum(c["fn"] for c in self.counts.values())
        if tp == fp == fn == 0:
            return 1.0
        return 2 * tp / (2 * tp + fp + fn)

    def to_dict(self) -> dict:
        return {
            "level": self.level_name,
            "micro_f1": self.micro_f1,
            "per_class_f1": self.per_class_f1,
            "counts": self.counts,
            "n_patches": self.n_patches,
            "tau": self.tau,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        return cls(
            level_name=raw["level"],
            micro_f1=raw["micro_f1"],
            per_class_f1=dict(raw["per_class_f1"]),
            counts={k: dict(v) for k, v in raw["counts"].items()},
            n_patches=raw["n_patches"],
            tau=raw["tau"],
        )


def report_from_probs(
    pred_probs: np.ndarray,
    truth_probs: np.ndarray,
    probs_level: OntologyLevel,
    eval_level: OntologyLevel | Level | str,
    rule: ThresholdRule | None = None,
) -> EvalReport:
    """Aggregate predictions/truths to ``eval_level``, binarize, and count.

    ``pred_probs`` and ``truth_probs`` are (N, C) at ``probs_level``.
    """
    rule = rule or ThresholdRule()
    eval_level = eval_level if isinstance(eval_level, OntologyLevel) else build_level(eval_level)
    if _COARSENESS[eval_level.name] < _COARSENESS[probs_level.name]:
        raise OntologyError(
            f"cannot evaluate a {probs_level.name.value} model at the finer "
            f"level {eval_level.name.value}"
        )
    pred = np.asarray(pred_probs, dtype=np.float64)
    truth = np.asarray(truth_probs, dtype=np.float64)
    if eval_level.name is not probs_level.name:
        matrix = build_aggregation(probs_level.name, eval_level.name).matrix()
        pred = pred @ matrix.T
        truth = truth @ matrix.T
    pred_sets = [predicted_label_set(p, rule) for p in pred]
    true_sets = [truth_label_set(t) for t in truth]
    score = micro_f1(pred_sets, true_sets)
    counts = per_class_counts(pred_sets, true_sets, eval_level.cardinality)
    codes = eval_level.codes
    return EvalReport(
        level_name=eval_level.name.value,
        micro_f1=score,
        per_class_f1={
            codes[c]: 2 * tp / (2 * tp + fp + fn) for c, (tp, fp, fn) in counts.items()
        },
        counts={
            codes[c]: {"tp": tp, "fp": fp, "fn": fn} for c, (tp, fp, fn) in counts.items()
        },
        n_patches=pred.shape[0],
        tau=rule.tau,
    )


def evaluate_model(
    bundle: ArtifactBundle,
    records: Sequence[PatchRecord],
    level: OntologyLevel | Level | str,
    rule: ThresholdRule | None = None,
    loader: PatchLoader | None = None,
    batch_size: int = 256,
) -> EvalReport:
    """Full evaluation of an artifact on manifest records at one level."""
    if loader is None:
        raise ValueError("a PatchLoader is required to read record rasters")
    probs = predict_probs(bundle, records, loader, batch_size=batch_size)
    truth = np.stack([rec.label.probs for rec in records])
    truth_level = records[0].label.level if records else build_level(Level.LEVEL2)
    # Truth ships at LEVEL2; bring it to the model's level first.
    if truth_level.name is not bundle.level.name:
        matrix = build_aggregation(truth_level.name, bundle.level.name).matrix()
        truth = truth @ matrix.T
    return report_from_probs(probs, truth, bundle.level, level, rule)


def sweep_tau(
    bundle: ArtifactBundle,
    records: Sequence[PatchRecord],
    level: OntologyLevel | Level | str,
    taus: Iterable[float],
    loader: PatchLoader,
    batch_size: int = 256,
) -> list[tuple[float, float]]:
    """Micro-F1 as a function of the prediction threshold (one forward pass)."""
    probs = predict_probs(bundle, records, loader, batch_size=batch_size)
    truth = np.stack([rec.label.probs for rec in records])
    truth_level = records[0].label.level
    if truth_level.name is not bundle.level.name:
        matrix = build_aggregation(truth_level.name, bundle.level.name).matrix()
        truth = truth @ matrix.T
    out = []
    for tau in taus:
        report = report_from_probs(probs, truth, bundle.level, level, ThresholdRule(tau=tau))
        out.append((float(tau), report.micro_f1))
    return out
