"""Acceptance gate.

Full-scale benchmark figures need a corpus far beyond desk scale, so the
gate checks properties and trends instead: each test below is one acceptance
criterion, runs at its stated tolerance on the bundled synthetic seasonal
corpus, and prints a PASS line with the measured values (run with ``-s`` to
see them). The corpus carries two seasonal-twin class pairs that are
pixel-identical at the mono reference month, so any temporal advantage
measured here comes from the annual signal alone.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from helpers import random_simplex
from test_losses import bce_oracle, focal_oracle, kl_oracle, numeric_logit_gradient
from temporal_lulc.dataset import (
    PatchLoader,
    TileSpec,
    load_manifest,
    reassemble_patches,
    stratified_split,
    tile_to_patches,
)
from temporal_lulc.evaluation import (
    micro_counts,
    micro_f1,
    per_class_counts,
    report_from_probs,
)
from temporal_lulc.mapping import change_detect, mask_iou, predict_map
from temporal_lulc.models import (
    EncoderConfig,
    TemporalHeadConfig,
    load_artifact,
    predict_probs,
    weights_hash,
)
from temporal_lulc.ontology import (
    LabelDistribution,
    Level,
    aggregate_distribution,
    build_aggregation,
    build_level,
)
from temporal_lulc.rasters import read_raster
from temporal_lulc.synth import SynthConfig, generate_change_pair, generate_synthetic_corpus
from temporal_lulc.training import TrainConfig, train_mono, train_temporal

SEED = 20260809
LEVELS = ("LEVEL1", "LEVEL1_5", "LEVEL2")
RUNTIME_BUDGET_S = 900.0
L1 = build_level(Level.LEVEL1)
L15 = build_level(Level.LEVEL1_5)
L2 = build_level(Level.LEVEL2)


def note(message: str) -> None:
    print(f"\nACCEPTANCE {message}", flush=True)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Synthetic corpus, both trained models, and test-split reports."""
    root = tmp_path_factory.mktemp("acceptance")
    times = {}

    t0 = time.time()
    synth_cfg = SynthConfig(tiles=10, grid_n=10, patch_px=32, seed=SEED)
    corpus = generate_synthetic_corpus(synth_cfg, root / "corpus")
    times["synth"] = time.time() - t0

    records = load_manifest(corpus.manifest_path)
    split = stratified_split(records, seed=SEED)
    loader = PatchLoader.for_manifest(corpus.manifest_path, cache_size=24)
    train_r = split.subset(records, "train")
    val_r = split.subset(records, "val")
    test_r = split.subset(records, "test")

    t0 = time.time()
    mono_cfg = TrainConfig(
        epochs=8, lr_mono=3e-4, lr_decay_interval_epochs=4, batch_size=64, seed=SEED
    )
    encoder_cfg = EncoderConfig(n_classes=15, backbone="resnet18", pretrained_init=False)
    mono = train_mono(train_r, val_r, mono_cfg, encoder_cfg, loader, out_dir=root / "mono")
    times["train_mono"] = time.time() - t0

    t0 = time.time()
    temporal_cfg = TrainConfig(
        epochs=25, lr_temporal=1e-3, lr_decay_interval_epochs=25, batch_size=64, seed=SEED
    )
    temporal = train_temporal(
        train_r,
        val_r,
        temporal_cfg,
        mono.model,
        mono.stats,
        loader,
        head_config=TemporalHeadConfig(feature_dim=512, n_classes=15),
        out_dir=root / "temporal",
    )
    times["train_temporal"] = time.time() - t0

    t0 = time.time()
    bundles = {"mono": load_artifact(root / "mono"), "temporal": load_artifact(root / "temporal")}
    truth = np.stack([rec.label.probs for rec in test_r])
    reports = {}
    for name, bundle in bundles.items():
        probs = predict_probs(bundle, test_r, loader)
        reports[name] = {
            level: report_from_probs(probs, truth, L2, level) for level in LEVELS
        }
    times["evaluate"] = time.time() - t0

    return {
        "root": root,
        "synth_cfg": synth_cfg,
        "corpus": corpus,
        "records": records,
        "split": split,
        "loader": loader,
        "mono": mono,
        "temporal": temporal,
        "bundles": bundles,
        "reports": reports,
        "times": times,
    }


def test_temporal_advantage_margin(pipeline):
    """Multi-temporal micro-F1 beats mono-temporal by >= 5 points at LEVEL2."""
    mono_f1 = pipeline["reports"]["mono"]["LEVEL2"].micro_f1
    multi_f1 = pipeline["reports"]["temporal"]["LEVEL2"].micro_f1
    margin = multi_f1 - mono_f1
    assert margin >= 0.05, f"temporal margin {margin:.4f} below 5 points"
    note(
        f"temporal-advantage: PASS (mono {mono_f1:.4f}, temporal {multi_f1:.4f}, "
        f"margin {margin * 100:.2f} points)"
    )


def test_desk_scale_runtime_within_budget(pipeline):
    """The synth -> train -> eval comparison fits the 15-minute budget."""
    total = sum(pipeline["times"].values())
    assert total < RUNTIME_BUDGET_S, f"pipeline took {total:.0f}s"
    note(
        "runtime: PASS ("
        + ", ".join(f"{k} {v:.1f}s" for k, v in pipeline["times"].items())
        + f"; total {total:.1f}s < {RUNTIME_BUDGET_S:.0f}s)"
    )


def test_coarser_levels_score_at_least_finer(pipeline):
    """Micro-F1 at LEVEL1 >= LEVEL1_5 >= LEVEL2 for both models."""
    for name in ("mono", "temporal"):
        scores = [pipeline["reports"][name][level].micro_f1 for level in LEVELS]
        assert scores[0] >= scores[1] >= scores[2], f"{name}: {scores}"
    note(
        "aggregation-trend: PASS ("
        + "; ".join(
            f"{name} " + "/".join(f"{pipeline['reports'][name][lv].micro_f1:.4f}" for lv in LEVELS)
            for name in ("mono", "temporal")
        )
        + " for LEVEL1/LEVEL1_5/LEVEL2)"
    )


def test_loss_values_match_bruteforce_oracles():
    from temporal_lulc.training import bce_loss, focal_loss, kl_loss

    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 16))
        t = random_simplex(rng, n)
        p_simplex = random_simplex(rng, n)
        p_uniform = rng.uniform(0, 1, n)
        gamma = float(rng.uniform(0, 4))
        worst = max(worst, abs(float(kl_loss(t, p_simplex)) - kl_oracle(t, p_simplex)))
        worst = max(worst, abs(float(bce_loss(t, p_uniform)) - bce_oracle(t, p_uniform)))
        worst = max(
            worst, abs(float(focal_loss(t, p_uniform, gamma)) - focal_oracle(t, p_uniform, gamma))
        )
        assert worst < 1e-9
        assert abs(float(focal_loss(t, p_uniform, 0.0)) - float(bce_loss(t, p_uniform))) < 1e-12
    assert abs(float(kl_loss([1.0, 0.0], [0.5, 0.5])) - math.log(2)) < 1e-9
    note(f"loss-oracles: PASS (100 random pairs per loss, worst |diff| {worst:.2e} < 1e-9)")


def test_loss_logit_gradients_match_finite_differences():
    from temporal_lulc.training import bce_loss, focal_loss, kl_loss

    rng = np.random.default_rng(SEED + 1)
    losses = {
        "kl": kl_loss,
        "bce": bce_loss,
        "focal": lambda t, p: focal_loss(t, p, gamma=2.0),
    }
    worst = 0.0
    for name, loss_fn in losses.items():
        for _ in range(100):
            n = int(rng.integers(3, 12))
            target = torch.tensor(random_simplex(rng, n))
            logits = torch.tensor(rng.normal(0, 1.5, n), requires_grad=True)
            loss_fn(target, torch.softmax(logits, dim=-1)).backward()
            analytic = logits.grad.numpy()
            numeric = numeric_logit_gradient(loss_fn, target, logits.detach().numpy())
            rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-12)
            assert rel < 1e-4, f"{name}: relative error {rel:.2e}"
            worst = max(worst, rel)
    note(f"gradient-checks: PASS (100 points per loss, worst relative error {worst:.2e} < 1e-4)")


def test_f1_matches_confusion_count_oracle():
    rng = np.random.default_rng(SEED + 2)
    n_classes = 11
    pred_sets, true_sets = [], []
    for _ in range(1000):
        pred_sets.append(frozenset(np.flatnonzero(rng.random(n_classes) < 0.25).tolist()))
        true_sets.append(frozenset(np.flatnonzero(rng.random(n_classes) < 0.25).tolist()))
    tp = fp = fn = 0
    per_class = {}
    for pred, true in zip(pred_sets, true_sets):
        for c in range(n_classes):
            in_p, in_t = c in pred, c in true
            stats = per_class.setdefault(c, [0, 0, 0])
            if in_p and in_t:
                tp += 1
                stats[0] += 1
            elif in_p:
                fp += 1
                stats[1] += 1
            elif in_t:
                fn += 1
                stats[2] += 1
    assert micro_counts(pred_sets, true_sets) == (tp, fp, fn)
    assert micro_f1(pred_sets, true_sets) == 2 * tp / (2 * tp + fp + fn)
    counted = per_class_counts(pred_sets, true_sets, n_classes)
    for c, stats in per_class.items():
        if sum(stats) == 0:
            assert c not in counted
        else:
            assert counted[c] == tuple(stats)
    # and a report's stored counts re-derive its scalar
    probs = np.stack([random_simplex(rng, 15) for _ in range(200)])
    truths = np.stack([random_simplex(rng, 15) for _ in range(200)])
    report = report_from_probs(probs, truths, L2, Level.LEVEL2)
    assert abs(report.micro_from_counts() - report.micro_f1) < 1e-12
    note("metric-oracle: PASS (1000 instances exact match; counts re-derive micro within 1e-12)")


def test_aggregation_properties_hold_in_bulk():
    rng = np.random.default_rng(SEED + 3)
    maps = {
        ("LEVEL2", "LEVEL1"): build_aggregation(L2, L1),
        ("LEVEL2", "LEVEL1_5"): build_aggregation(L2, L15),
        ("LEVEL1_5", "LEVEL1"): build_aggregation(L15, L1),
    }
    for amap in maps.values():
        matrix = amap.matrix()
        assert np.array_equal(matrix.sum(axis=0), np.ones(amap.source.cardinality))
        assert np.all(matrix.sum(axis=1) >= 1)
    direct, to_15, up = (
        maps[("LEVEL2", "LEVEL1")],
        maps[("LEVEL2", "LEVEL1_5")],
        maps[("LEVEL1_5", "LEVEL1")],
    )
    for _ in range(1000):
        p = rng.dirichlet(np.ones(15))
        q = rng.dirichlet(np.ones(15))
        alpha = float(rng.uniform())
        dp = LabelDistribution(L2, p)
        out = aggregate_distribution(dp, direct)
        assert abs(out.probs.sum() - dp.probs.sum()) < 1e-12
        mixed = aggregate_distribution(LabelDistribution(L2, alpha * p + (1 - alpha) * q), direct)
        parts = alpha * out.probs + (1 - alpha) * aggregate_distribution(
            LabelDistribution(L2, q), direct
        ).probs
        np.testing.assert_allclose(mixed.probs, parts, atol=1e-12)
        two_step = aggregate_distribution(aggregate_distribution(dp, to_15), up)
        np.testing.assert_array_equal(out.probs, two_step.probs)
    note(
        "aggregation-properties: PASS (1000 distributions: mass 1e-12, linearity 1e-12, "
        "composition exact; all maps are partitions)"
    )


def test_tile_decomposition_partition():
    rng = np.random.default_rng(SEED + 4)
    raster = rng.normal(size=(320, 320, 4)).astype(np.float32)
    spec = TileSpec(tile_id="t", grid_n=40, patch_px=8)
    patches = tile_to_patches(spec, raster)
    assert len(patches) == 1600
    positions = [pos for pos, _ in patches]
    assert len(set(positions)) == 1600
    assert np.array_equal(reassemble_patches(patches, 40), raster)
    identity = tile_to_patches(TileSpec(tile_id="t", grid_n=1), raster)
    assert len(identity) == 1 and np.array_equal(identity[0][1], raster)
    note("tiling: PASS (40x40 -> 1600 disjoint patches, bit-exact reassembly; grid 1 identity)")


def test_encoder_untouched_by_temporal_training(pipeline):
    result = pipeline["temporal"]
    assert result.encoder_hash_before == result.encoder_hash_after
    assert weights_hash(pipeline["mono"].model) == result.encoder_hash_before
    note(f"frozen-encoder: PASS (sha256 {result.encoder_hash_after[:16]}... unchanged)")


def test_change_mask_recovers_known_region(pipeline, tmp_path):
    # Twin classes are excluded from the pair: their reference-month ambiguity
    # pins dominant confidence to ~0.5, the change rule's uncertainty band.
    cfg = SynthConfig(
        tiles=1,
        grid_n=10,
        patch_px=32,
        seed=SEED + 5,
        mix_prob=0.0,
        active_classes=("11", "13", "33", "41", "51"),
    )
    pair = generate_change_pair(cfg, tmp_path)
    bundle = pipeline["bundles"]["mono"]
    spec = TileSpec(tile_id="change_pair", grid_n=10, patch_px=32)
    map_a = predict_map(bundle, read_raster(pair.dir_a / "month_06.tlc"), spec)
    map_b = predict_map(bundle, read_raster(pair.dir_b / "month_06.tlc"), spec)
    cmap = change_detect(map_a, map_b)
    iou = mask_iou(cmap.changed, pair.change_mask)
    assert iou >= 0.9, f"change-mask IoU {iou:.3f}"
    self_cmap = change_detect(map_a, map_a)
    assert not self_cmap.changed.any()
    assert not self_cmap.uncertain.any()
    note(
        f"change-detection: PASS (IoU {iou:.3f} >= 0.9 on {int(pair.change_mask.sum())} "
        f"changed cells; self-comparison clean)"
    )


def _mini_pipeline(root):
    """synth -> train -> eval -> map, small enough to run twice."""
    cfg = SynthConfig(tiles=2, grid_n=6, patch_px=24, seed=SEED + 6)
    corpus = generate_synthetic_corpus(cfg, root / "corpus")
    records = load_manifest(corpus.manifest_path)
    split = stratified_split(records, seed=SEED)
    loader = PatchLoader.for_manifest(corpus.manifest_path)
    train_cfg = TrainConfig(
        epochs=2, lr_mono=1e-3, lr_decay_interval_epochs=10, batch_size=32, seed=SEED
    )
    encoder_cfg = EncoderConfig(n_classes=15, backbone="resnet18", pretrained_init=False)
    result = train_mono(
        split.subset(records, "train"), split.subset(records, "val"),
        train_cfg, encoder_cfg, loader, out_dir=root / "mono",
    )
    bundle = load_artifact(root / "mono")
    probs = predict_probs(bundle, split.subset(records, "test"), loader)
    truth = np.stack([r.label.probs for r in split.subset(records, "test")])
    report = report_from_probs(probs, truth, L2, Level.LEVEL2)
    raster = read_raster(corpus.tile_dirs[0] / "month_06.tlc")
    lmap = predict_map(bundle, raster, TileSpec(tile_id="tile_000", grid_n=6, patch_px=24))
    return report.micro_f1, json.dumps(lmap.to_dict())


def test_pipeline_reruns_reproduce_metrics_and_maps(tmp_path):
    f1_a, map_a = _mini_pipeline(tmp_path / "run_a")
    f1_b, map_b = _mini_pipeline(tmp_path / "run_b")
    assert abs(f1_a - f1_b) <= 1e-6, f"micro-F1 drifted: {f1_a} vs {f1_b}"
    assert map_a == map_b, "map JSON differs between reruns"
    note(f"determinism: PASS (two full runs: micro-F1 {f1_a:.6f} both, map JSON identical)")


def test_logged_lr_follows_decay_under_defaults(tiny_corpus):
    records = load_manifest(tiny_corpus.manifest_path)
    loader = PatchLoader.for_manifest(tiny_corpus.manifest_path)
    config = TrainConfig(seed=SEED)  # stock settings: 20 epochs, 1e-4, x0.1 every epoch
    result = train_mono(
        records[:8], [], config,
        EncoderConfig(n_classes=15, backbone="resnet18", pretrained_init=False), loader,
    )
    logged = [entry.lr for entry in result.log]
    assert logged == [1e-4 * 0.1**epoch for epoch in range(20)]
    note("lr-schedule: PASS (20 logged rates equal 1e-4 * 0.1^epoch exactly)")
