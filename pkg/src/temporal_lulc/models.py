"""Network topologies and model artifacts.

Two models: a residual convolutional encoder whose linear head emits a
softmax class distribution per patch, and a recurrent temporal head that
consumes the sequence of 12 monthly encoder features and emits one
distribution per patch-year. Artifacts are self-contained directories
(config, weights, normalization stats, ontology snapshot) so inference never
depends on training-time state.
"""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torchvision

from . import __version__
from .dataset import MONTHS, PatchLoader, PatchRecord
from .ontology import ClassDef, Level, OntologyLevel
from .preprocess import ChannelStats, normalize_patch

__all__ = [
    "BACKBONE_FEATURE_DIMS",
    "EncoderConfig",
    "TemporalHeadConfig",
    "MonoClassifier",
    "TemporalHead",
    "adapt_input_channels",
    "mono_forward",
    "temporal_forward",
    "extract_feature_sequence",
    "extract_feature_sequences",
    "save_feature_cache",
    "load_feature_cache",
    "weights_hash",
    "ArtifactBundle",
    "save_mono_artifact",
    "save_temporal_artifact",
    "load_artifact",
    "predict_probs",
    "code_version",
]

logger = logging.getLogger(__name__)

BACKBONE_FEATURE_DIMS = {"resnet18": 512, "resnet50": 2048}

CONFIG_FILENAME = "config.json"
WEIGHTS_FILENAME = "weights.bin"
STATS_FILENAME = "stats.json"
ONTOLOGY_FILENAME = "ontology.json"


@dataclass
class EncoderConfig:
    """Residual encoder with a distribution head."""

    n_classes: int
    backbone: str = "resnet50"
    input_channels: int = 4
    pretrained_init: bool = True
    nir_init: str = "mean_rgb"  # or "random"

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONE_FEATURE_DIMS:
            raise ValueError(
                f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONE_FEATURE_DIMS)}"
            )
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.nir_init not in ("mean_rgb", "random"):
            raise ValueError("nir_init must be 'mean_rgb' or 'random'")

    @property
    def feature_dim(self) -> int:
        return BACKBONE_FEATURE_DIMS[self.backbone]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "EncoderConfig":
        return cls(**dict(raw))


@dataclass
class TemporalHeadConfig:
    """LSTM over monthly features followed by two fully connected layers."""

    feature_dim: int
    n_classes: int
    sequence_length: int = 12
    lstm_hidden: int = 512
    lstm_layers: int = 1
    fc_dim: int = 256

    def __post_init__(self) -> None:
        for name in ("feature_dim", "n_classes", "sequence_length", "lstm_hidden", "lstm_layers", "fc_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TemporalHeadConfig":
        return cls(**dict(raw))


def adapt_input_channels(conv: nn.Conv2d, nir_init: str = "mean_rgb") -> nn.Conv2d:
    """Widen a 3-channel first conv layer to 4 channels.

    RGB kernels are copied; the new near-infrared kernel is the elementwise
    mean of the RGB kernels (preserves the pretrained activation scale) or
    left at its random initialization when ``nir_init='random'``.
    """
    if conv.in_channels != 3:
        raise ValueError(f"expected a 3-channel first layer, got {conv.in_channels}")
    new = nn.Conv2d(
        4,
        conv.out_channels,
        kernel_size=conv.kernel_size,
        stride=conv.stride,
        padding=conv.padding,
        dilation=conv.dilation,
        bias=conv.bias is not None,
    )
    with torch.no_grad():
        new.weight[:, :3] = conv.weight
        if nir_init == "mean_rgb":
            new.weight[:, 3] = conv.weight.mean(dim=1)
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new


def _build_backbone(config: EncoderConfig) -> nn.Module:
    weights = None
    if config.pretrained_init:
        try:
            enum_name = {"resnet18": "ResNet18_Weights", "resnet50": "ResNet50_Weights"}
            weights = getattr(torchvision.models, enum_name[config.backbone]).IMAGENET1K_V1
        except Exception as exc:  # pragma: no cover - depends on torchvision version
            logger.warning("pretrained weights unavailable (%s); using random init", exc)
            weights = None
    factory = getattr(torchvision.models, config.backbone)
    try:
        backbone = factory(weights=weights)
    except Exception as exc:
        logger.warning("pretrained weights could not be loaded (%s); using random init", exc)
        backbone = factory(weights=None)
    return backbone


class MonoClassifier(nn.Module):
    """Residual encoder + linear head + softmax over one ontology level."""

    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        self.config = config
        backbone = _build_backbone(config)
        if config.input_channels == 4:
            backbone.conv1 = adapt_input_channels(backbone.conv1, config.nir_init)
        elif config.input_channels != 3:
            raise ValueError("input_channels must be 3 or 4")
        backbone.fc = nn.Identity()
        self.backbone = backbone
        self.head = nn.Linear(config.feature_dim, config.n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Global-pooled encoder features, shape (B, feature_dim)."""
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.head(self.features(x)), dim=-1)


class TemporalHead(nn.Module):
    """LSTM over the monthly feature sequence; final hidden state -> FC -> FC -> softmax."""

    def __init__(self, config: TemporalHeadConfig) -> None:
        super().__init__()
        self.config = config
        self.lstm = nn.LSTM(
            input_size=config.feature_dim,
            hidden_size=config.lstm_hidden,
            num_layers=config.lstm_layers,
            batch_first=True,
        )
        self.fc1 = nn.Linear(config.lstm_hidden, config.fc_dim)
        self.fc2 = nn.Linear(config.fc_dim, config.n_classes)

    def forward(self, sequence: torch.Tensor) -> torch.Tensor:
        if sequence.ndim != 3 or sequence.shape[1] != self.config.sequence_length:
            raise ValueError(
                f"expected a (B, {self.config.sequence_length}, {self.config.feature_dim}) "
                f"sequence, got shape {tuple(sequence.shape)}"
            )
        _, (hidden, _) = self.lstm(sequence)
        x = torch.relu(self.fc1(hidden[-1]))
        return torch.softmax(self.fc2(x), dim=-1)


def _as_batch_tensor(patches: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Accept (H, W, C), (B, H, W, C) numpy or (B, C, H, W) torch input."""
    if isinstance(patches, torch.Tensor):
        return patches
    arr = np.asarray(patches, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) patches, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)


def mono_forward(model: MonoClassifier, patches: np.ndarray | torch.Tensor) -> np.ndarray:
    """Inference pass: normalized patches in, distributions (B, n_classes) out."""
    model.eval()
    with torch.no_grad():
        probs = model(_as_batch_tensor(patches))
    return probs.numpy()


def temporal_forward(head: TemporalHead, sequences: np.ndarray | torch.Tensor) -> np.ndarray:
    """Inference pass: (B, 12, feature_dim) sequences in, distributions out."""
    if not isinstance(sequences, torch.Tensor):
        arr = np.asarray(sequences, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        sequences = torch.from_numpy(np.ascontiguousarray(arr))
    head.eval()
    with torch.no_grad():
        probs = head(sequences)
    return probs.numpy()


def extract_feature_sequences(
    records: Sequence[PatchRecord],
    model: MonoClassifier,
    loader: PatchLoader,
    stats: ChannelStats,
    batch_size: int = 256,
    months: Sequence[int] = MONTHS,
) -> np.ndarray:
    """Frozen-encoder features for every record-month, shape (N, 12, feature_dim).

    Iterates month-major so the loader's tile cache is effective. Row order
    follows ``months`` positionally: permuting the input months permutes the
    rows identically.
    """
    for rec in records:
        missing = rec.missing_months(months)
        if missing:
            raise ValueError(f"patch {rec.patch_id}: month {missing[0]} missing")
    model.eval()
    out = np.zeros((len(records), len(months), model.config.feature_dim), dtype=np.float32)
    with torch.no_grad():
        for j, month in enumerate(months):
            for start in range(0, len(records), batch_size):
                chunk = records[start : start + batch_size]
                patches = normalize_patch(loader.load_month(chunk, month), stats)
                feats = model.features(_as_batch_tensor(patches))
                out[start : start + len(chunk), j] = feats.numpy()
    return out


def extract_feature_sequence(
    record: PatchRecord,
    model: MonoClassifier,
    loader: PatchLoader,
    stats: ChannelStats,
    months: Sequence[int] = MONTHS,
) -> np.ndarray:
    """Feature sequence of a single record, shape (12, feature_dim)."""
    return extract_feature_sequences([record], model, loader, stats, months=months)[0]


def save_feature_cache(path: str | Path, patch_ids: Sequence[str], features: np.ndarray) -> Path:
    path = Path(path)
    np.savez(path, patch_ids=np.asarray(patch_ids), features=features)
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_feature_cache(path: str | Path) -> tuple[list[str], np.ndarray]:
    data = np.load(path, allow_pickle=False)
    return [str(pid) for pid in data["patch_ids"]], data["features"]


def weights_hash(module_or_state: nn.Module | Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over all named tensors; any weight change changes the digest."""
    state = (
        module_or_state.state_dict()
        if isinstance(module_or_state, nn.Module)
        else module_or_state
    )
    digest = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name]
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def code_version() -> str:
    """Package version, plus the git commit when running from a checkout."""
    version = __version__
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=2,
        )
        if out.returncode == 0:
            return f"{version}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return version


@dataclass
class ArtifactBundle:
    """A trained model plus everything needed to run it."""

    kind: str  # "mono" or "temporal"
    level: OntologyLevel
    stats: ChannelStats
    config: dict
    model: MonoClassifier | None = None  # mono artifacts
    encoder: MonoClassifier | None = None  # temporal artifacts (frozen)
    head: TemporalHead | None = None
    path: Path | None = None

    @property
    def reference_month(self) -> int:
        return int(self.config.get("reference_month", 6))


def _write_ontology(directory: Path, level: OntologyLevel) -> None:
    (directory / ONTOLOGY_FILENAME).write_text(
        json.dumps(level.to_dict(), indent=2) + "\n"
    )


def _read_ontology(directory: Path) -> OntologyLevel:
    raw = json.loads((directory / ONTOLOGY_FILENAME).read_text())
    return OntologyLevel(
        name=Level.parse(raw["level"]),
        classes=tuple(
            ClassDef(code=c["code"], name=c["name"], parent_code=c.get("parent_code"))
            for c in raw["classes"]
        ),
    )


def save_mono_artifact(
    directory: str | Path,
    model: MonoClassifier,
    level: OntologyLevel,
    stats: ChannelStats,
    seed: int,
    train_config: Mapping | None = None,
    reference_month: int = 6,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = {
        "kind": "mono",
        "encoder": model.config.to_dict(),
        "train": dict(train_config) if train_config else None,
        "level": level.name.value,
        "seed": seed,
        "reference_month": reference_month,
        "code_version": code_version(),
    }
    (directory / CONFIG_FILENAME).write_text(json.dumps(config, indent=2) + "\n")
    torch.save(model.state_dict(), directory / WEIGHTS_FILENAME)
    stats.save(directory / STATS_FILENAME)
    _write_ontology(directory, level)
    return directory


def save_temporal_artifact(
    directory: str | Path,
    head: TemporalHead,
    encoder: MonoClassifier,
    level: OntologyLevel,
    stats: ChannelStats,
    seed: int,
    train_config: Mapping | None = None,
) -> Path:
    """Self-contained temporal artifact: head weights plus the frozen encoder."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = {
        "kind": "temporal",
        "temporal": head.config.to_dict(),
        "encoder": encoder.config.to_dict(),
        "train": dict(train_config) if train_config else None,
        "level": level.name.value,
        "seed": seed,
        "code_version": code_version(),
    }
    (directory / CONFIG_FILENAME).write_text(json.dumps(config, indent=2) + "\n")
    torch.save(
        {"head": head.state_dict(), "encoder": encoder.state_dict()},
        directory / WEIGHTS_FILENAME,
    )
    stats.save(directory / STATS_FILENAME)
    _write_ontology(directory, level)
    return directory


def load_artifact(directory: str | Path) -> ArtifactBundle:
    directory = Path(directory)
    config = json.loads((directory / CONFIG_FILENAME).read_text())
    stats = ChannelStats.load(directory / STATS_FILENAME)
    level = _read_ontology(directory)
    blob = torch.load(directory / WEIGHTS_FILENAME, map_location="cpu", weights_only=True)
    kind = config["kind"]
    if kind == "mono":
        encoder_cfg = EncoderConfig.from_dict({**config["encoder"], "pretrained_init": False})
        model = MonoClassifier(encoder_cfg)
        model.load_state_dict(blob)
        model.eval()
        return ArtifactBundle(
            kind=kind, level=level, stats=stats, config=config, model=model, path=directory
        )
    if kind == "temporal":
        encoder_cfg = EncoderConfig.from_dict({**config["encoder"], "pretrained_init": False})
        encoder = MonoClassifier(encoder_cfg)
        encoder.load_state_dict(blob["encoder"])
        encoder.eval()
        head = TemporalHead(TemporalHeadConfig.from_dict(config["temporal"]))
        head.load_state_dict(blob["head"])
        head.eval()
        return ArtifactBundle(
            kind=kind,
            level=level,
            stats=stats,
            config=config,
            encoder=encoder,
            head=head,
            path=directory,
        )
    raise ValueError(f"unknown artifact kind {kind!r}")


def predict_probs(
    bundle: ArtifactBundle,
    records: Sequence[PatchRecord],
    loader: PatchLoader,
    batch_size: int = 256,
) -> np.ndarray:
    """Predicted distributions for manifest records, shape (N, n_classes)."""
    if bundle.kind == "mono":
        assert bundle.model is not None
        month = bundle.reference_month
        out = []
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            patches = normalize_patch(loader.load_month(chunk, month), bundle.stats)
            out.append(mono_forward(bundle.model, patches))
        return np.concatenate(out) if out else np.zeros((0, bundle.level.cardinality))
    assert bundle.encoder is not None and bundle.head is not None
    sequences = extract_feature_sequences(
        records, bundle.encoder, loader, bundle.stats, batch_size=batch_size
    )
    return temporal_forward(bundle.head, sequences)
