import pytest
import torch

from temporal_lulc.dataset import PatchLoader, load_manifest
from temporal_lulc.models import EncoderConfig, TemporalHeadConfig, load_artifact, weights_hash
from temporal_lulc.ontology import Level
from temporal_lulc.synth import SynthConfig, generate_synthetic_corpus
from temporal_lulc.training import (
    EpochLog,
    TrainConfig,
    load_train_log,
    lr_at,
    save_train_log,
    train_mono,
    train_temporal,
)

ENC = dict(backbone="resnet18", pretrained_init=False)


@pytest.fixture(scope="module")
def separable_corpus(tmp_path_factory):
    """One tile of pure urban/water patches: trivially separable at month 6."""
    out = tmp_path_factory.mktemp("separable")
    cfg = SynthConfig(
        tiles=1, grid_n=4, patch_px=16, seed=5, mix_prob=0.0, active_classes=("11", "51")
    )
    result = generate_synthetic_corpus(cfg, out)
    records = load_manifest(result.manifest_path)
    loader = PatchLoader.for_manifest(result.manifest_path)
    return records, loader


class TestSchedule:
    def test_defaults_match_training_configuration(self):
        cfg = TrainConfig()
        assert cfg.epochs == 20
        assert cfg.lr_mono == 1e-4
        assert cfg.lr_temporal == 1e-5
        assert cfg.lr_decay_gamma == 0.1
        assert cfg.lr_decay_interval_epochs == 1
        assert cfg.loss == "KL"
        assert cfg.batch_size == 64

    def test_per_epoch_decay_sequence(self):
        cfg = TrainConfig()
        rates = [lr_at(cfg.lr_mono, cfg, e) for e in range(5)]
        assert rates == [1e-4 * 0.1**e for e in range(5)]

    def test_interval_schedule(self):
        cfg = TrainConfig(lr_decay_interval_epochs=3)
        rates = [lr_at(1e-2, cfg, e) for e in range(7)]
        assert rates == [1e-2 * 0.1 ** (e // 3) for e in range(7)]
        assert rates[0] == rates[1] == rates[2] == 1e-2
        assert rates[3] < rates[2]

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(lr_mono=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lr_decay_gamma=1.5)
        with pytest.raises(ValueError):
            TrainConfig(loss="DICE")
        with pytest.raises(ValueError):
            TrainConfig(reference_month=13)

    def test_log_round_trip(self, tmp_path):
        log = [EpochLog(0, 0.5, 0.6, 0.7, 1e-4, 1.2), EpochLog(1, 0.4, 0.5, 0.8, 1e-5, 1.1)]
        save_train_log(log, tmp_path / "log.jsonl")
        again = load_train_log(tmp_path / "log.jsonl")
        assert again == log


class TestTrainMono:
    def test_smoke_one_epoch_emits_simplex_model(self, separable_corpus, tmp_path):
        records, loader = separable_corpus
        cfg = TrainConfig(epochs=1, batch_size=8, seed=0)
        result = train_mono(
            records[:10], records[10:12], cfg,
            EncoderConfig(n_classes=15, **ENC), loader, out_dir=tmp_path / "art",
        )
        assert len(result.log) == 1
        bundle = load_artifact(tmp_path / "art")
        probs = bundle.model(torch.zeros(2, 4, 16, 16))
        assert torch.all(probs >= 0)
        torch.testing.assert_close(probs.sum(dim=1), torch.ones(2))

    def test_loss_decreases_on_separable_corpus(self, separable_corpus):
        records, loader = separable_corpus
        cfg = TrainConfig(
            epochs=5, lr_mono=1e-3, lr_decay_interval_epochs=100, batch_size=16, seed=1
        )
        result = train_mono(records, [], cfg, EncoderConfig(n_classes=15, **ENC), loader)
        assert result.log[-1].train_loss < result.log[0].train_loss

    def test_logged_lr_follows_schedule(self, separable_corpus):
        records, loader = separable_corpus
        cfg = TrainConfig(epochs=3, batch_size=16, seed=2)  # paper-default decay
        result = train_mono(records[:8], [], cfg, EncoderConfig(n_classes=15, **ENC), loader)
        assert [e.lr for e in result.log] == [1e-4 * 0.1**e for e in range(3)]

    def test_empty_train_split_rejected(self, separable_corpus):
        records, loader = separable_corpus
        with pytest.raises(ValueError, match="empty train split"):
            train_mono([], records[:2], TrainConfig(), EncoderConfig(n_classes=15, **ENC), loader)

    def test_mismatched_level_cardinality_rejected(self, separable_corpus):
        records, loader = separable_corpus
        with pytest.raises(ValueError, match="cardinality"):
            train_mono(
                records[:4], [], TrainConfig(epochs=1),
                EncoderConfig(n_classes=15, **ENC), loader, level=Level.LEVEL1,
            )

    def test_metrics_reproducible_for_fixed_seed(self, separable_corpus):
        records, loader = separable_corpus
        cfg = TrainConfig(epochs=2, lr_mono=1e-3, batch_size=16, seed=11)
        runs = [
            train_mono(records[:12], records[12:16], cfg,
                       EncoderConfig(n_classes=15, **ENC), loader)
            for _ in range(2)
        ]
        for a, b in zip(runs[0].log, runs[1].log):
            assert a.train_loss == pytest.approx(b.train_loss, abs=1e-6)
            assert a.val_loss == pytest.approx(b.val_loss, abs=1e-6)
            assert a.val_micro_f1 == pytest.approx(b.val_micro_f1, abs=1e-6)


class TestTrainTemporal:
    def _encoder(self, separable_corpus, tmp_path):
        records, loader = separable_corpus
        cfg = TrainConfig(epochs=1, batch_size=16, seed=3)
        return train_mono(records, [], cfg, EncoderConfig(n_classes=15, **ENC), loader)

    def test_encoder_frozen_and_artifact_written(self, separable_corpus, tmp_path):
        records, loader = separable_corpus
        mono = self._encoder(separable_corpus, tmp_path)
        before = weights_hash(mono.model)
        cfg = TrainConfig(epochs=2, lr_temporal=1e-3, batch_size=16, seed=4)
        result = train_temporal(
            records[:12], records[12:16], cfg, mono.model, mono.stats, loader,
            head_config=TemporalHeadConfig(feature_dim=512, n_classes=15, lstm_hidden=64, fc_dim=32),
            out_dir=tmp_path / "temporal",
        )
        assert result.encoder_hash_before == before
        assert result.encoder_hash_after == before
        assert weights_hash(mono.model) == before
        bundle = load_artifact(tmp_path / "temporal")
        assert bundle.kind == "temporal"
        assert weights_hash(bundle.encoder) == before

    def test_overfits_ten_sequences(self, separable_corpus, tmp_path):
        records, loader = separable_corpus
        mono = self._encoder(separable_corpus, tmp_path)
        cfg = TrainConfig(
            epochs=200, lr_temporal=1e-2, lr_decay_interval_epochs=1000,
            batch_size=10, seed=5,
        )
        result = train_temporal(
            records[:10], [], cfg, mono.model, mono.stats, loader,
            head_config=TemporalHeadConfig(feature_dim=512, n_classes=15, lstm_hidden=64, fc_dim=32),
        )
        assert result.log[-1].train_loss < 0.01

    def test_missing_month_rejected(self, separable_corpus):
        records, loader = separable_corpus
        mono = self._encoder(separable_corpus, None)
        crippled = [r for r in records[:4]]
        crippled[0].months.pop(9)
        with pytest.raises(ValueError, match="month 9"):
            train_temporal(crippled, [], TrainConfig(epochs=1), mono.model, mono.stats, loader)
        crippled[0].months[9] = crippled[0].months[8]
