"""Distribution-label losses and the two training loops.

Targets are class-share distributions, not binarized multi-hot vectors, for
all three losses. The learning-rate schedule is the literal step decay
``lr0 * gamma ** (epoch // interval)``; with the default per-epoch factor of
0.1 the rate collapses within a few epochs, so practical runs usually widen
``lr_decay_interval_epochs`` (see README). The logged rates follow the
formula exactly.
"""

from __future__ import annotations

import copy
import json
import random
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .dataset import MONTHS, PatchLoader, PatchRecord
from .evaluation import ThresholdRule, micro_f1, predicted_label_set, truth_label_set
from .models import (
    EncoderConfig,
    MonoClassifier,
    TemporalHead,
    TemporalHeadConfig,
    extract_feature_sequences,
    save_mono_artifact,
    save_temporal_artifact,
    weights_hash,
)
from .ontology import Level, OntologyLevel, build_aggregation, build_level
from .preprocess import ChannelStats, compute_channel_stats, normalize_patch

__all__ = [
    "LOSSES",
    "TrainConfig",
    "EpochLog",
    "MonoTrainResult",
    "TemporalTrainResult",
    "kl_loss",
    "bce_loss",
    "focal_loss",
    "lr_at",
    "seed_everything",
    "train_mono",
    "train_temporal",
    "save_train_log",
    "load_train_log",
]

_EPS = 1e-12


def _as_float_tensor(value) -> torch.Tensor:
    value = getattr(value, "probs", value)
    if isinstance(value, torch.Tensor):
        return value if torch.is_floating_point(value) else value.double()
    # Lists and numpy input go through float64 so oracle-level precision holds.
    return torch.as_tensor(np.asarray(value, dtype=np.float64))


def _pair(target, predicted) -> tuple[torch.Tensor, torch.Tensor]:
    t = _as_float_tensor(target)
    p = _as_float_tensor(predicted)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: target {tuple(t.shape)} vs predicted {tuple(p.shape)}")
    return t, p


def _one_minus_eps(p: torch.Tensor) -> float:
    # 1 - 1e-12 is not representable in float32; keep the clamp inside the
    # dtype so log1p(-p) stays finite.
    return 1.0 - max(_EPS, float(torch.finfo(p.dtype).eps))


def kl_loss(target, predicted) -> torch.Tensor:
    """KL(target || predicted) = sum_i t_i * ln(t_i / p_i), with 0 ln 0 := 0.

    Batched inputs reduce to the mean over leading dimensions.
    """
    t, p = _pair(target, predicted)
    p = p.clamp_min(_EPS)
    terms = torch.where(t > 0, t * (torch.log(t.clamp_min(_EPS)) - torch.log(p)), t.new_zeros(()))
    per_sample = terms.sum(dim=-1)
    return per_sample.mean() if per_sample.ndim else per_sample


def bce_loss(target, predicted) -> torch.Tensor:
    """Mean over classes of -[t ln p + (1 - t) ln(1 - p)], p clamped away from {0, 1}."""
    t, p = _pair(target, predicted)
    p = p.clamp(_EPS, _one_minus_eps(p))
    terms = -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p))
    return terms.mean()


def focal_loss(target, predicted, gamma: float = 2.0) -> torch.Tensor:
    """Focal-weighted BCE; gamma=0 reduces exactly to :func:`bce_loss`."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    t, p = _pair(target, predicted)
    p = p.clamp(_EPS, _one_minus_eps(p))
    terms = -(
        t * (1.0 - p) ** gamma * torch.log(p)
        + (1.0 - t) * p**gamma * torch.log1p(-p)
    )
    return terms.mean()


LOSSES: dict[str, Callable] = {"KL": kl_loss, "BCE": bce_loss, "FOCAL": focal_loss}


@dataclass
class TrainConfig:
    """Optimization hyperparameters shared by both training loops."""

    epochs: int = 20
    lr_mono: float = 1e-4
    lr_temporal: float = 1e-5
    lr_decay_gamma: float = 0.1
    lr_decay_interval_epochs: int = 1
    loss: str = "KL"
    batch_size: int = 64
    seed: int = 0
    focal_gamma: float = 2.0
    reference_month: int = 6

    def __post_init__(self) -> None:
        self.loss = self.loss.upper()
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_mono <= 0 or self.lr_temporal <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_decay_gamma <= 1:
            raise ValueError("lr_decay_gamma must be in (0, 1]")
        if self.lr_decay_interval_epochs < 1:
            raise ValueError("lr_decay_interval_epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.reference_month not in MONTHS:
            raise ValueError("reference_month must be within 1..12")

    def loss_fn(self) -> Callable:
        if self.loss == "FOCAL":
            return lambda t, p: focal_loss(t, p, gamma=self.focal_gamma)
        return LOSSES[self.loss]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TrainConfig":
        return cls(**dict(raw))


def lr_at(base_lr: float, config: TrainConfig, epoch: int) -> float:
    """Scheduled rate for a 0-indexed epoch: lr0 * gamma ** (epoch // interval)."""
    return base_lr * config.lr_decay_gamma ** (epoch // config.lr_decay_interval_epochs)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_micro_f1: float
    lr: float
    seconds: float


def save_train_log(log: Sequence[EpochLog], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for entry in log:
            fh.write(json.dumps(asdict(entry)) + "\n")
    return path


def load_train_log(path: str | Path) -> list[EpochLog]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(EpochLog(**json.loads(line)))
    return out


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _targets_at_level(records: Sequence[PatchRecord], level: OntologyLevel) -> np.ndarray:
    """Stack record labels, aggregated from LEVEL2 to the requested level."""
    if not records:
        return np.zeros((0, level.cardinality), dtype=np.float32)
    if level.name is Level.LEVEL2:
        return np.stack([rec.label.probs for rec in records]).astype(np.float32)
    amap = build_aggregation(Level.LEVEL2, level.name)
    matrix = amap.matrix()
    raw = np.stack([rec.label.probs for rec in records])
    return (raw @ matrix.T).astype(np.float32)


def _val_micro_f1(probs: np.ndarray, targets: np.ndarray, rule: ThresholdRule) -> float:
    pred_sets = [predicted_label_set(p, rule) for p in probs]
    true_sets = [truth_label_set(t) for t in targets]
    return micro_f1(pred_sets, true_sets)


def _fit(
    model: torch.nn.Module,
    x_train: torch.Tensor,
    y_train: torch.Tensor,
    x_val: torch.Tensor,
    y_val: torch.Tensor,
    config: TrainConfig,
    base_lr: float,
    rule: ThresholdRule,
) -> tuple[dict, list[EpochLog]]:
    """Shared epoch loop; returns the best-val-F1 state dict and the log."""
    loss_fn = config.loss_fn()
    optimizer = torch.optim.Adam(model.parameters(), lr=base_lr)
    generator = torch.Generator().manual_seed(config.seed)
    n = x_train.shape[0]
    best_f1 = -1.0
    best_state = copy.deepcopy(model.state_dict())
    log: list[EpochLog] = []
    for epoch in range(config.epochs):
        t0 = time.time()
        lr = lr_at(base_lr, config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        perm = torch.randperm(n, generator=generator)
        total_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            optimizer.zero_grad()
            probs = model(x_train[idx])
            loss = loss_fn(y_train[idx], probs)
            loss.backward()
            optimizer.step()
            total_loss += float(loss.detach()) * len(idx)
        train_loss = total_loss / n
        model.eval()
        if x_val.shape[0]:
            with torch.no_grad():
                val_probs = model(x_val)
                val_loss = float(loss_fn(y_val, val_probs))
            val_f1 = _val_micro_f1(val_probs.numpy(), y_val.numpy(), rule)
        else:
            val_loss, val_f1 = float("nan"), float("nan")
        log.append(
            EpochLog(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                val_micro_f1=val_f1,
                lr=lr,
                seconds=time.time() - t0,
            )
        )
        if x_val.shape[0] == 0 or val_f1 > best_f1:
            best_f1 = val_f1 if x_val.shape[0] else best_f1
            best_state = copy.deepcopy(model.state_dict())
    return best_state, log


@dataclass
class MonoTrainResult:
    model: MonoClassifier
    log: list[EpochLog]
    stats: ChannelStats
    artifact_dir: Path | None = None


@dataclass
class TemporalTrainResult:
    head: TemporalHead
    log: list[EpochLog]
    encoder_hash_before: str
    encoder_hash_after: str
    artifact_dir: Path | None = None


def _patch_tensor(
    records: Sequence[PatchRecord], loader: PatchLoader, month: int, stats: ChannelStats
) -> torch.Tensor:
    if not records:
        return torch.zeros((0, 4, 1, 1))
    patches = normalize_patch(loader.load_month(records, month), stats)
    return torch.from_numpy(np.ascontiguousarray(patches)).permute(0, 3, 1, 2)


def train_mono(
    train_records: Sequence[PatchRecord],
    val_records: Sequence[PatchRecord],
    config: TrainConfig,
    encoder_config: EncoderConfig,
    loader: PatchLoader,
    level: OntologyLevel | Level | str = Level.LEVEL2,
    out_dir: str | Path | None = None,
    rule: ThresholdRule | None = None,
) -> MonoTrainResult:
    """Train the encoder end-to-end on reference-month patches.

    Channel statistics are computed over the training split only and stored
    with the artifact; the best-validation-micro-F1 checkpoint is returned.
    """
    if not train_records:
        raise ValueError("empty train split")
    level = level if isinstance(level, OntologyLevel) else build_level(level)
    if encoder_config.n_classes != level.cardinality:
        raise ValueError(
            f"encoder n_classes={encoder_config.n_classes} does not match "
            f"{level.name.value} cardinality {level.cardinality}"
        )
    rule = rule or ThresholdRule()
    month = config.reference_month
    seed_everything(config.seed)

    stats = compute_channel_stats(loader.load_patch(r, month) for r in train_records)
    x_train = _patch_tensor(train_records, loader, month, stats)
    y_train = torch.from_numpy(_targets_at_level(train_records, level))
    x_val = _patch_tensor(val_records, loader, month, stats)
    y_val = torch.from_numpy(_targets_at_level(val_records, level))

    model = MonoClassifier(encoder_config)
    best_state, log = _fit(model, x_train, y_train, x_val, y_val, config, config.lr_mono, rule)
    model.load_state_dict(best_state)
    model.eval()

    artifact_dir = None
    if out_dir is not None:
        artifact_dir = save_mono_artifact(
            out_dir,
            model,
            level,
            stats,
            seed=config.seed,
            train_config=config.to_dict(),
            reference_month=month,
        )
        save_train_log(log, Path(out_dir) / "trainlog.jsonl")
    return MonoTrainResult(model=model, log=log, stats=stats, artifact_dir=artifact_dir)


def train_temporal(
    train_records: Sequence[PatchRecord],
    val_records: Sequence[PatchRecord],
    config: TrainConfig,
    encoder: MonoClassifier,
    stats: ChannelStats,
    loader: PatchLoader,
    level: OntologyLevel | Level | str = Level.LEVEL2,
    head_config: TemporalHeadConfig | None = None,
    out_dir: str | Path | None = None,
    rule: ThresholdRule | None = None,
) -> TemporalTrainResult:
    """Train the recurrent head on cached monthly features of a frozen encoder.

    The encoder is never updated; its weight hash is checked before and
    after and a mismatch raises.
    """
    if not train_records:
        raise ValueError("empty train split")
    level = level if isinstance(level, OntologyLevel) else build_level(level)
    rule = rule or ThresholdRule()
    for rec in list(train_records) + list(val_records):
        missing = rec.missing_months()
        if missing:
            raise ValueError(f"patch {rec.patch_id}: month {missing[0]} missing")

    seed_everything(config.seed)
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    hash_before = weights_hash(encoder)

    feats_train = extract_feature_sequences(train_records, encoder, loader, stats)
    feats_val = (
        extract_feature_sequences(val_records, encoder, loader, stats)
        if val_records
        else np.zeros((0, len(MONTHS), encoder.config.feature_dim), dtype=np.float32)
    )
    x_train = torch.from_numpy(feats_train)
    y_train = torch.from_numpy(_targets_at_level(train_records, level))
    x_val = torch.from_numpy(feats_val)
    y_val = torch.from_numpy(_targets_at_level(val_records, level))

    head_config = head_config or TemporalHeadConfig(
        feature_dim=encoder.config.feature_dim, n_classes=level.cardinality
    )
    if head_config.n_classes != level.cardinality:
        raise ValueError("temporal head n_classes does not match the requested level")
    head = TemporalHead(head_config)
    best_state, log = _fit(head, x_train, y_train, x_val, y_val, config, config.lr_temporal, rule)
    head.load_state_dict(best_state)
    head.eval()

    hash_after = weights_hash(encoder)
    if hash_after != hash_before:
        raise RuntimeError("frozen-encoder contract violated: weights changed during training")

    artifact_dir = None
    if out_dir is not None:
        artifact_dir = save_temporal_artifact(
            out_dir,
            head,
            encoder,
            level,
            stats,
            seed=config.seed,
            train_config=config.to_dict(),
        )
        save_train_log(log, Path(out_dir) / "trainlog.jsonl")
    return TemporalTrainResult(
        head=head,
        log=log,
        encoder_hash_before=hash_before,
        encoder_hash_after=hash_after,
        artifact_dir=artifact_dir,
    )
