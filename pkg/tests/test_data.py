"""Synthetic generator, normalization, splitting, windowing and on-disk format."""

import filecmp
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solar_vlm.data import (
    FEATURE_NAMES,
    POWER_INDEX,
    STEPS_PER_DAY,
    DataError,
    NumericWindow,
    SiteMetadata,
    chronological_split,
    cloud_correlation,
    count_windows,
    fit_normalizer,
    load_dataset,
    make_synthetic_dataset,
    save_dataset,
    slide_windows,
)
from solar_vlm.solar import solar_elevation


class TestGenerator:
    def test_shape_eight_sites_thirty_days(self):
        ds = make_synthetic_dataset(8, 30, seed=7)
        assert ds.series.shape == (8, 2880, len(FEATURE_NAMES))
        assert ds.num_steps == 30 * 96 == 30 * STEPS_PER_DAY
        assert np.all(np.diff(ds.timestamps) == 15)
        assert np.all(np.isfinite(ds.series))

    def test_power_is_zero_at_night(self, small_dataset):
        ds = small_dataset
        for i, s in enumerate(ds.sites):
            elev = solar_elevation(ds.timestamps, s.latitude, s.longitude)
            night = elev < -1.0
            assert night.any()
            assert np.all(ds.series[i, night, POWER_INDEX] == 0.0)

    def test_power_is_nonnegative(self, small_dataset):
        assert np.all(small_dataset.series[..., POWER_INDEX] >= 0.0)

    def test_colocated_sites_share_cloud_modulation(self):
        sites = [SiteMetadata(0, 39.0, 114.0), SiteMetadata(1, 39.0, 114.0), SiteMetadata(2, 40.0, 115.5)]
        ds = make_synthetic_dataset(3, 4, seed=3, sites=sites)
        np.testing.assert_array_equal(ds.cloud_cover[0], ds.cloud_cover[1])
        assert not np.array_equal(ds.cloud_cover[0], ds.cloud_cover[2])

    def test_cloud_correlation_decays_with_distance(self):
        assert cloud_correlation(0.0) == 1.0
        assert cloud_correlation(100.0) == pytest.approx(np.exp(-1.0))
        assert cloud_correlation(10.0) > cloud_correlation(50.0)

    def test_same_seed_same_data(self):
        a = make_synthetic_dataset(3, 4, seed=11)
        b = make_synthetic_dataset(3, 4, seed=11)
        np.testing.assert_array_equal(a.series, b.series)
        c = make_synthetic_dataset(3, 4, seed=12)
        assert not np.array_equal(a.series, c.series)

    @pytest.mark.parametrize("sites,days", [(1, 5), (0, 5), (3, 0), (3, 3)])
    def test_rejects_degenerate_sizes(self, sites, days):
        with pytest.raises(DataError):
            make_synthetic_dataset(sites, days, seed=0)


class TestNormalization:
    def test_constant_column_normalizes_to_zero(self, caplog):
        x = np.random.default_rng(0).normal(size=(2, 50, 3))
        x[:, :, 1] = 4.2
        with caplog.at_level(logging.WARNING):
            stats = fit_normalizer(x)
        assert "constant" in caplog.text
        assert stats.floored[:, 1].all()
        np.testing.assert_array_equal(stats.apply(x)[:, :, 1], 0.0)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        x = rng.normal(loc=50, scale=20, size=(3, 100, 5))
        stats = fit_normalizer(x)
        back = stats.invert(stats.apply(x))
        assert np.max(np.abs(back - x)) < 1e-6 * 20

    def test_train_mean_is_zero(self):
        x = np.random.default_rng(2).gamma(2.0, size=(2, 80, 4))
        z = fit_normalizer(x).apply(x)
        assert np.max(np.abs(z.mean(axis=1))) < 1e-6

    def test_empty_train_split_rejected(self):
        with pytest.raises(DataError):
            fit_normalizer(np.zeros((2, 0, 3)))

    def test_serialization(self):
        x = np.random.default_rng(3).normal(size=(2, 10, 3))
        stats = fit_normalizer(x)
        again = type(stats).from_dict(stats.to_dict())
        np.testing.assert_array_equal(again.apply(x), stats.apply(x))


class TestWindows:
    def test_window_count_reference(self):
        # 2880 - 288 - 48 + 1
        assert count_windows(2880, 288, 48, 1) == 2545

    def test_exactly_one_window(self):
        assert count_windows(20, 12, 8, 1) == 1
        assert count_windows(336, 288, 48, 336) == 1

    def test_too_short_yields_nothing_with_warning(self, caplog):
        series = np.zeros((1, 10, len(FEATURE_NAMES)))
        ts = np.arange(10) * 15
        with caplog.at_level(logging.WARNING):
            assert list(slide_windows(series, ts, 8, 4)) == []
        assert "too short" in caplog.text

    def test_windows_align_with_targets(self, small_dataset):
        ds = small_dataset
        pairs = list(slide_windows(ds.series[:, :200], ds.timestamps[:200], 48, 8, stride=16))
        assert len(pairs) == count_windows(200, 48, 8, 16)
        w, t = pairs[2]
        np.testing.assert_array_equal(w.values, ds.series[:, 32:80])
        np.testing.assert_array_equal(t.power, ds.series[:, 80:88, POWER_INDEX])
        assert t.horizon_minutes[0] - w.timestamps[-1] == 15

    @given(
        steps=st.integers(1, 400),
        lookback=st.integers(1, 60),
        horizon=st.integers(1, 60),
        stride=st.integers(1, 30),
    )
    def test_count_matches_enumeration(self, steps, lookback, horizon, stride):
        expected = len(range(0, steps - lookback - horizon + 1, stride))
        assert count_windows(steps, lookback, horizon, stride) == expected

    def test_numeric_window_validates(self):
        with pytest.raises(DataError):
            NumericWindow(np.full((1, 3, 14), np.nan), np.array([0, 15, 30]), list(FEATURE_NAMES))
        with pytest.raises(DataError):
            NumericWindow(np.zeros((1, 3, 14)), np.array([0, 15, 45]), list(FEATURE_NAMES))


class TestSplit:
    @given(st.integers(10, 5000))
    def test_chronological_and_covering(self, n):
        b = chronological_split(n)
        assert b.train[0] == 0 and b.test[1] == n
        assert b.train[1] == b.val[0] and b.val[1] == b.test[0]
        assert b.train[1] <= b.val[1] <= b.test[1]

    def test_bad_ratios(self):
        with pytest.raises(DataError):
            chronological_split(100, (0.5, 0.5, 0.5))


class TestOnDisk:
    def test_round_trip(self, tmp_path, small_dataset):
        save_dataset(small_dataset, tmp_path, seed=1)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["manifest.json", "scenes.csv", "site_0.csv", "site_1.csv", "site_2.csv", "sites.csv"]
        ds = load_dataset(tmp_path)
        np.testing.assert_allclose(ds.series, small_dataset.series, rtol=1e-9, atol=1e-9)
        np.testing.assert_array_equal(ds.timestamps, small_dataset.timestamps)
        np.testing.assert_allclose(ds.cloud_cover, small_dataset.cloud_cover, rtol=1e-9)

    def test_byte_identical_rewrite(self, tmp_path):
        for d in ("a", "b"):
            save_dataset(make_synthetic_dataset(3, 4, seed=5), tmp_path / d, seed=5)
        match, mismatch, errors = filecmp.cmpfiles(
            tmp_path / "a", tmp_path / "b", [p.name for p in (tmp_path / "a").iterdir()], shallow=False
        )
        assert not mismatch and not errors and len(match) == 6

    def test_rejects_nan(self, tmp_path, small_dataset):
        save_dataset(small_dataset, tmp_path)
        p = tmp_path / "site_1.csv"
        lines = p.read_text().splitlines()
        cells = lines[5].split(",")
        cells[0] = "nan"
        lines[5] = ",".join(cells)
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="non-finite"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)


@settings(max_examples=30, deadline=None)
@given(st.floats(-89, 89), st.floats(-179, 179))
def test_site_metadata_accepts_valid_coordinates(lat, lon):
    s = SiteMetadata(0, lat, lon)
    assert s.latitude == lat


def test_site_metadata_rejects_out_of_range():
    with pytest.raises(DataError):
        SiteMetadata(0, 91.0, 0.0)
