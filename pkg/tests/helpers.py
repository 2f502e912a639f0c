"""Shared test utilities: record factories and a signature-nearest model
double that classifies synthetic patches without any training."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from temporal_lulc.dataset import MONTHS, PatchRecord
from temporal_lulc.models import ArtifactBundle, EncoderConfig
from temporal_lulc.ontology import LabelDistribution, Level, build_level
from temporal_lulc.preprocess import ChannelStats
from temporal_lulc.synth import TWIN_MONTH, class_signatures


def random_simplex(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n))


def make_record(patch_id: str, probs, months=None, tile_id="tile_000", row=0, col=0) -> PatchRecord:
    level = build_level(Level.LEVEL2)
    months = months or {m: f"tiles/{tile_id}/month_{m:02d}.tlc" for m in MONTHS}
    return PatchRecord(
        patch_id=patch_id,
        tile_id=tile_id,
        row=row,
        col=col,
        months=dict(months),
        label=LabelDistribution.from_probs(level, probs),
    )


class SignatureNearestNet(nn.Module):
    """Assigns softmax mass by distance between the patch mean and the class
    signatures at one month. Deterministic and accurate on synthetic tiles,
    which makes it a convenient stand-in for a trained encoder."""

    def __init__(self, month: int = TWIN_MONTH, sharpness: float = 400.0) -> None:
        super().__init__()
        sig = class_signatures()[:, month - 1, :]  # (15, 4)
        self.register_buffer("signatures", torch.from_numpy(sig))
        self.sharpness = sharpness
        self.config = EncoderConfig(n_classes=15, backbone="resnet18", pretrained_init=False)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return x.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        means = self.features(x)  # (B, 4)
        d2 = torch.cdist(means, self.signatures) ** 2
        return torch.softmax(-self.sharpness * d2, dim=-1)


def signature_bundle(month: int = TWIN_MONTH) -> ArtifactBundle:
    """A mono-style bundle around the signature-nearest double (identity stats)."""
    stats = ChannelStats(mean=np.zeros(4), std=np.ones(4), n_pixels=1)
    model = SignatureNearestNet(month=month)
    model.eval()
    return ArtifactBundle(
        kind="mono",
        level=build_level(Level.LEVEL2),
        stats=stats,
        config={"kind": "mono", "reference_month": month},
        model=model,
    )
