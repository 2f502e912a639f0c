import numpy as np
import pytest

from temporal_lulc.preprocess import (
    ChannelStats,
    StatsAccumulator,
    compute_channel_stats,
    denormalize_patch,
    normalize_patch,
)


def two_pass_oracle(rasters):
    """Reference: materialize everything, then population mean/std."""
    flat = np.concatenate([np.asarray(r, dtype=np.float64).reshape(-1, 4) for r in rasters])
    return flat.mean(axis=0), flat.std(axis=0)


class TestChannelStats:
    def test_constant_corpus_clamps_std(self):
        rasters = [np.full((4, 4, 4), 0.5, dtype=np.float32) for _ in range(3)]
        with pytest.warns(UserWarning, match="zero-variance"):
            stats = compute_channel_stats(rasters)
        np.testing.assert_allclose(stats.mean, 0.5)
        np.testing.assert_allclose(stats.std, 1e-6)
        assert stats.n_pixels == 48

    def test_two_pixel_corpus_population_std(self):
        raster = np.stack([np.zeros((1, 4)), np.ones((1, 4))]).astype(np.float32)
        stats = compute_channel_stats([raster])
        np.testing.assert_allclose(stats.mean, 0.5)
        np.testing.assert_allclose(stats.std, 0.5)  # population, not sample

    def test_streaming_matches_two_pass_oracle(self):
        rng = np.random.default_rng(6)
        rasters = [rng.normal(loc=0.4, scale=0.2, size=(7, 5, 4)) for _ in range(40)]
        stats = compute_channel_stats(rasters)
        mean, std = two_pass_oracle(rasters)
        np.testing.assert_allclose(stats.mean, mean, atol=1e-9)
        np.testing.assert_allclose(stats.std, std, atol=1e-9)

    def test_order_independent_within_tolerance(self):
        rng = np.random.default_rng(7)
        rasters = [rng.normal(size=(6, 6, 4)) for _ in range(30)]
        forward = compute_channel_stats(rasters)
        backward = compute_channel_stats(list(reversed(rasters)))
        np.testing.assert_allclose(forward.mean, backward.mean, atol=1e-9)
        np.testing.assert_allclose(forward.std, backward.std, atol=1e-9)

    def test_shard_merge_matches_single_stream(self):
        rng = np.random.default_rng(8)
        rasters = [rng.normal(size=(5, 5, 4)) for _ in range(20)]
        whole = compute_channel_stats(rasters)
        a, b = StatsAccumulator(), StatsAccumulator()
        for r in rasters[:7]:
            a.update(r)
        for r in rasters[7:]:
            b.update(r)
        a.merge(b)
        merged = a.finalize()
        np.testing.assert_allclose(merged.mean, whole.mean, atol=1e-9)
        np.testing.assert_allclose(merged.std, whole.std, atol=1e-9)

    def test_empty_stream_rejected(self):
        with pytest.raises(ValueError, match="no pixels"):
            compute_channel_stats([])

    def test_wrong_channel_count_rejected(self):
        with pytest.raises(ValueError):
            compute_channel_stats([np.zeros((4, 4, 3))])

    def test_json_round_trip(self, tmp_path):
        stats = ChannelStats(mean=np.array([0.1, 0.2, 0.3, 0.4]), std=np.ones(4), n_pixels=99)
        stats.save(tmp_path / "stats.json")
        again = ChannelStats.load(tmp_path / "stats.json")
        np.testing.assert_array_equal(again.mean, stats.mean)
        np.testing.assert_array_equal(again.std, stats.std)
        assert again.n_pixels == 99

    def test_nonpositive_std_rejected(self):
        with pytest.raises(ValueError):
            ChannelStats(mean=np.zeros(4), std=np.zeros(4), n_pixels=1)


class TestNormalization:
    STATS = ChannelStats(
        mean=np.array([0.2, 0.4, 0.6, 0.8]), std=np.array([0.1, 0.2, 0.3, 0.4]), n_pixels=1
    )

    def test_mean_maps_to_zero(self):
        patch = np.broadcast_to(self.STATS.mean, (4, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(normalize_patch(patch, self.STATS), 0.0, atol=1e-6)

    def test_mean_plus_std_maps_to_one(self):
        patch = np.broadcast_to(self.STATS.mean + self.STATS.std, (4, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(normalize_patch(patch, self.STATS), 1.0, atol=1e-6)

    def test_round_trip(self):
        rng = np.random.default_rng(9)
        patch = rng.normal(size=(8, 8, 4)).astype(np.float32)
        back = denormalize_patch(normalize_patch(patch, self.STATS), self.STATS)
        np.testing.assert_allclose(back, patch, atol=1e-6)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            normalize_patch(np.zeros((4, 4, 3)), self.STATS)

    def test_self_normalization_yields_unit_moments(self):
        rng = np.random.default_rng(10)
        rasters = [rng.normal(loc=0.3, scale=0.15, size=(16, 16, 4)) for _ in range(10)]
        stats = compute_channel_stats(rasters)
        normalized = np.concatenate(
            [normalize_patch(r, stats).reshape(-1, 4) for r in rasters]
        ).astype(np.float64)
        np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(normalized.std(axis=0), 1.0, atol=1e-6)
