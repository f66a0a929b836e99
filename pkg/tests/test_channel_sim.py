"""Tests for channel_sim.py."""

import numpy as np
import pytest

from src.channel_sim import (
    MODES,
    SPEED_OF_LIGHT,
    FluctuationMode,
    SamplingPlan,
    ShadowingField,
    SiteModel,
    antenna_positions,
    build_database,
    channel_response,
    emit_snapshot,
    frequency_response,
    grid_points,
    mix_patterns,
    impairment_spread,
    mode_preset,
    parse_schedule,
    pattern_target,
    propagation_paths,
    sample_route,
    static_fingerprint,
)
from src.csi_image import SnapshotPlan
from src.errors import ConfigurationError, RejectedInputError
from src.evaluation import pearson, spatial_correlation_decay
from src.storage import encode_database


def small_site(profile="phone", seed=0):
    return SiteModel.build(width=6.0, depth=5.0, ap_position=(3.0, 4.0), profile=profile, seed=seed,
                           scatterer_count=4)


class TestFrequencyResponse:
    """Test the multipath frequency response."""

    def test_single_path_is_flat(self):
        """Test that one path gives a constant amplitude across subcarriers."""
        offsets = np.linspace(-10e6, 10e6, 30)
        amplitude = np.abs(frequency_response(offsets, np.array([37e-9]), np.array([0.2])))
        np.testing.assert_allclose(amplitude, 0.2, rtol=1e-12)

    def test_two_path_nulls(self):
        """Test that two equal paths null at odd multiples of 1/(2 tau), spaced 1/tau apart."""
        tau = 200e-9
        nulls = np.array([-7.5, -2.5, 2.5, 7.5]) * 1e6
        amplitude = np.abs(frequency_response(nulls, np.array([0.0, tau]), np.array([1.0, 1.0])))
        np.testing.assert_allclose(amplitude, 0.0, atol=1e-9)
        peak = np.abs(frequency_response(np.array([5e6]), np.array([0.0, tau]), np.array([1.0, 1.0])))
        assert peak[0] == pytest.approx(2.0)

    def test_los_delay_is_distance_over_c(self):
        """Test that the first path's delay is the AP distance over the speed of light."""
        site = SiteModel.build()
        gains, delays = propagation_paths(site, (1.0, 1.0))
        distance = np.hypot(10.5 - 1.0, 13.0 - 1.0)
        assert delays[0] == pytest.approx(distance / SPEED_OF_LIGHT)
        assert len(gains) == len(delays) > 1


class TestSiteModel:
    """Test the site description."""

    def test_channel_response_deterministic(self):
        """Test that the same site and location give the same response."""
        a = channel_response(SiteModel.build(seed=3), (2.0, 2.0))
        b = channel_response(SiteModel.build(seed=3), (2.0, 2.0))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (30, 3)

    def test_outside_area_rejected(self):
        """Test that a location outside the floor is rejected."""
        with pytest.raises(RejectedInputError, match="outside"):
            channel_response(SiteModel.build(), (25.0, 2.0))

    def test_ap_must_be_covered(self):
        """Test that an AP inside the blocked core is a configuration error."""
        with pytest.raises(ConfigurationError, match="AP position"):
            SiteModel.build(ap_position=(10.5, 8.0))

    def test_subcarriers_evenly_spaced(self):
        """Test that subcarrier offsets are evenly spaced and centred."""
        offsets = SiteModel.build().subcarrier_offsets()
        steps = np.diff(offsets)
        np.testing.assert_allclose(steps, steps[0])
        assert offsets.mean() == pytest.approx(0.0, abs=1e-6)

    def test_antennae_half_wavelength_apart(self):
        """Test that the three NIC antennae sit half a wavelength apart."""
        site = SiteModel.build()
        positions = antenna_positions(site, (4.0, 4.0))
        np.testing.assert_allclose(np.diff(positions[:, 0]), site.wavelength / 2)

    def test_dict_roundtrip(self):
        """Test that to_dict/from_dict rebuilds an equal site."""
        site = SiteModel.build(seed=5)
        assert SiteModel.from_dict(site.to_dict()) == site


class TestStaticFingerprint:
    """Test carrier phase, shadowing and the per-location fingerprint."""

    def test_frequencies_centred_on_carrier(self):
        """Test that subcarrier frequencies are the carrier plus the baseband offsets."""
        site = SiteModel.build()
        frequencies = site.subcarrier_frequencies()
        np.testing.assert_allclose(frequencies - site.carrier_hz, site.subcarrier_offsets())
        assert frequencies.mean() == pytest.approx(5.18e9)

    def test_antennae_see_different_patterns(self):
        """Test that antennae half a wavelength apart do not measure the same subcarrier pattern."""
        site = SiteModel.build(seed=1)
        points = grid_points(site, 2.0)[::3]
        outer = [pearson(r[:, 0], r[:, 2]) for r in (channel_response(site, p) for p in points)]
        assert len(outer) >= 10
        assert np.mean(outer) < 0.9
        assert max(outer) < 0.999

    def test_shadowing_correlation_is_exponential(self):
        """Test that field values d apart correlate near exp(-d / shadowing_distance) with unit variance."""
        site = SiteModel.build(seed=4)
        field = ShadowingField.for_site(site)
        rng = np.random.default_rng(0)
        starts = rng.uniform((0.0, 0.0), (21.0, 16.0), size=(300, 2))
        angles = rng.uniform(0.0, 2 * np.pi, size=300)
        for d in (0.0, 1.0, 3.0, 6.0):
            ends = starts + d * np.stack([np.cos(angles), np.sin(angles)], axis=1)
            products = np.concatenate([field(a) * field(b) for a, b in zip(starts, ends)])
            assert products.mean() == pytest.approx(np.exp(-d / site.shadowing_distance), abs=0.06)

    def test_fingerprint_deterministic_and_positive(self):
        """Test that the fingerprint is a pure function of site and location and stays positive."""
        a = static_fingerprint(SiteModel.build(seed=3), (2.0, 2.0))
        b = static_fingerprint(SiteModel.build(seed=3), (2.0, 2.0))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (30, 3)
        assert np.all(a > 0)

    def test_fingerprint_keeps_path_loss(self):
        """Test that the fingerprint's mean level is the multipath response's mean level."""
        site = SiteModel.build(seed=2)
        for point in [(2.0, 2.0), (10.5, 14.5), (19.0, 1.0)]:
            fingerprint = static_fingerprint(site, point)
            assert fingerprint.mean() == pytest.approx(channel_response(site, point).mean(), rel=0.02)

    def test_share_validation(self):
        """Test that negative shares or shares summing above one are rejected."""
        with pytest.raises(ConfigurationError, match="shares"):
            SiteModel(device_share=0.8, shadowing_share=0.3)
        with pytest.raises(ConfigurationError, match="shares"):
            SiteModel(shadowing_share=-0.1)
        with pytest.raises(ConfigurationError, match="Shadowing distance"):
            SiteModel(shadowing_distance=0.0)

    @pytest.mark.slow
    def test_correlation_decays_over_half_metre_bins(self):
        """Test that mean fingerprint correlation falls in every 0.5 m bin out to 5 m on the default floor."""
        site = SiteModel.build(seed=0)
        field = ShadowingField.for_site(site)
        points = grid_points(site, 0.5)
        images = {rp: static_fingerprint(site, p, field) for rp, p in enumerate(points)}
        locations = {rp: tuple(p) for rp, p in enumerate(points)}
        table = spatial_correlation_decay(images, locations)
        values = table["mean_correlation"].to_numpy()
        assert table["pairs"].min() > 0
        assert np.all(np.diff(values) < 0)
        assert values[0] - values[-1] > 0.1


class TestModes:
    """Test fluctuation modes and schedules."""

    def test_presets(self):
        """Test that quiet targets 0.8 and busy 0.4 self-correlation."""
        assert mode_preset("quiet").target_self_correlation == 0.8
        assert mode_preset(" Busy ").target_self_correlation == 0.4

    def test_unknown_mode(self):
        """Test that an unknown mode name is rejected."""
        with pytest.raises(ConfigurationError, match="Unknown fluctuation mode"):
            parse_schedule("quiet,party")

    def test_empty_schedule(self):
        """Test that an empty schedule is rejected."""
        with pytest.raises(ConfigurationError):
            parse_schedule(" , ")

    def test_target_range(self):
        """Test that a target correlation outside (0, 1] is rejected."""
        with pytest.raises(ConfigurationError, match="target correlation"):
            FluctuationMode("odd", 0.0, 0.0, 0.0)


class TestSnapshots:
    """Test snapshot emission and calibration."""

    def test_noiseless_rows_identical(self):
        """Test that zero noise, fades and outliers give H identical scans."""
        site = SiteModel.build()
        mode = FluctuationMode("still", 0.8, 0.0, 0.0, scan_noise=0.0)
        image = emit_snapshot(site, (2.0, 2.0), mode, 0.0, np.random.default_rng(0))
        assert image.dims == (30, 30, 3)
        np.testing.assert_array_equal(image.amplitudes, np.repeat(image.amplitudes[:1], 30, axis=0))

    def test_mix_patterns_correlation(self):
        """Test that blending independent moving patterns hits the target correlation on average."""
        rng = np.random.default_rng(0)
        static = rng.uniform(1.0, 2.0, size=(200, 3))
        values = [
            pearson(mix_patterns(static, rng.uniform(size=(200, 3)), 0.6),
                    mix_patterns(static, rng.uniform(size=(200, 3)), 0.6))
            for _ in range(50)
        ]
        assert np.mean(values) == pytest.approx(0.6, abs=0.05)

    def test_no_impairments_no_spread(self):
        """Test that a mode without noise, fades or outliers needs no compensation."""
        mode = FluctuationMode("still", 0.7, 0.0, 0.0, scan_noise=0.0)
        assert impairment_spread(mode, 30) == pytest.approx(0.0, abs=1e-12)
        static = np.random.default_rng(1).uniform(1.0, 2.0, size=(30, 3))
        assert pattern_target(mode, static) == pytest.approx(0.7)

    def test_pattern_target_compensates_and_caps(self):
        """Test that impairments raise the pattern target, never above 1."""
        static = np.random.default_rng(1).uniform(1.0, 2.0, size=(30, 3))
        busy = pattern_target(MODES["busy"], static)
        assert 0.4 < busy <= 1.0
        flat = np.full((30, 3), 2.0)
        flat[0, 0] = 2.001
        assert pattern_target(MODES["quiet"], flat) == 1.0

    @pytest.mark.parametrize("name,low,high", [("quiet", 0.7, 0.9), ("busy", 0.3, 0.5)])
    def test_mode_calibration(self, name, low, high):
        """Test that mean same-location cross-time correlation falls inside each mode's envelope."""
        site = SiteModel.build(seed=11)
        rps = grid_points(site, 1.0)
        picks = np.random.default_rng(4).choice(len(rps), size=40, replace=False)
        mode = MODES[name]
        shadowing = ShadowingField.for_site(site)
        values = []
        for k, index in enumerate(picks):
            rng = np.random.default_rng([11, k])
            static = static_fingerprint(site, rps[index], shadowing)
            first = emit_snapshot(site, rps[index], mode, 0.0, rng, static)
            later = emit_snapshot(site, rps[index], mode, 1800.0, rng, static)
            values.append(pearson(first.amplitudes, later.amplitudes))
        assert low <= np.mean(values) <= high


class TestSampling:
    """Test RP grids and test routes."""

    def test_half_metre_grid_density(self):
        """Test that a 0.5 m grid on the default floor yields about 1185 RPs."""
        count = len(grid_points(SiteModel.build(), 0.5))
        assert abs(count - 1185) <= 0.1 * 1185

    def test_one_metre_grid(self):
        """Test that a 1 m grid yields about 300 RPs, none in the blocked core."""
        site = SiteModel.build()
        points = grid_points(site, 1.0)
        assert 270 <= len(points) <= 330
        assert not any(site.is_blocked(p) for p in points)

    def test_route_off_grid_and_speed_bounded(self):
        """Test that test points avoid RPs and consecutive points are at most 4 m/s * dt apart."""
        site = SiteModel.build()
        plan = SamplingPlan(rp_grid_spacing=0.5, test_point_count=195, update_interval=1.0)
        rps = grid_points(site, 0.5)
        route = sample_route(site, plan, rps, np.random.default_rng(9))
        assert route.shape == (195, 2)
        nearest = np.min(np.linalg.norm(route[:, None, :] - rps[None, :, :], axis=-1), axis=1)
        assert np.all(nearest > 0)
        steps = np.linalg.norm(np.diff(route, axis=0), axis=1)
        assert np.all(steps <= 4.0 * plan.update_interval + 1e-9)
        assert all(site.covers(p) for p in route)

    def test_invalid_speed_range(self):
        """Test that min speed above max is rejected."""
        with pytest.raises(ConfigurationError, match="Speed range"):
            SamplingPlan(speed_range=(3.0, 1.0))


class TestBuildDatabase:
    """Test full database construction on a small site."""

    def build(self, seed=2, workers=1):
        site = small_site()
        return build_database(
            site, SamplingPlan(rp_grid_spacing=1.0, test_point_count=6), SnapshotPlan(4, 2),
            parse_schedule("quiet,busy"), seed, workers,
        )

    def test_layout(self):
        """Test that the dataset holds W1 images per RP, one route per day and W2 images per test point."""
        dataset = self.build()
        groups = dataset.train.by_rp()
        assert len(groups) == len(grid_points(dataset.site, 1.0))
        assert all(len(records) == 4 for records in groups.values())
        assert list(dataset.routes) == ["day1-quiet", "day2-busy"]
        for route in dataset.routes.values():
            points = route.test_points(2)
            assert len(points) == 6
            assert all(len(p) == 2 for p in points)
            assert all(r.is_test for r in route.records)

    def test_reproducible(self):
        """Test that the same seed gives byte-identical databases."""
        a, b = self.build(), self.build()
        assert encode_database(a.train) == encode_database(b.train)
        for label in a.routes:
            assert encode_database(a.routes[label]) == encode_database(b.routes[label])

    def test_worker_count_does_not_change_output(self):
        """Test that parallel simulation gives the same bytes as serial."""
        assert encode_database(self.build(workers=1).train) == encode_database(self.build(workers=3).train)

    def test_seed_changes_output(self):
        """Test that a different seed gives a different database."""
        assert encode_database(self.build(seed=2).train) != encode_database(self.build(seed=3).train)

    def test_zero_rps(self):
        """Test that a grid coarser than the floor is a configuration error."""
        with pytest.raises(ConfigurationError, match="no RPs"):
            build_database(small_site(), SamplingPlan(rp_grid_spacing=50.0), SnapshotPlan(2, 1),
                           parse_schedule("quiet"), 0)
