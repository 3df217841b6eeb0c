"""Trait extraction: heights, leaf profiles, assembled reports."""

import math

import numpy as np
import pytest

import sapmap as sm
from sapmap.errors import SapmapError
from sapmap.georef import EarthTransform
from sapmap.leafwood import LeafWoodParams, Segmentation, segment_leaf_wood
from sapmap.skeleton import TopologyParams, skeletonize
from sapmap.synth import BranchSpec, SaplingSpec
from sapmap.traits import (LeafProfile, compute_traits, format_profile,
                           format_report, leaf_profile, parse_profile,
                           parse_report, resample_profile, stem_height)

ANCHOR = sm.GeoFix(0.0, 51.7759, -1.3399, 80.0)


def uniform_slab(rng, n=5000, z_lo=0.10, z_hi=0.99):
    pts = np.column_stack([
        rng.uniform(-0.2, 0.2, n), rng.uniform(-0.2, 0.2, n),
        rng.uniform(z_lo, z_hi, n),
    ])
    return pts


class TestStemHeight:
    def test_known_span(self, rng):
        cloud = sm.PointCloud(uniform_slab(rng), frame_id="M1")
        assert stem_height(cloud) == pytest.approx(0.89, abs=0.005)

    def test_outliers_removed(self, rng):
        pts = uniform_slab(rng)
        outliers = np.column_stack([
            rng.uniform(-0.1, 0.1, 5), rng.uniform(-0.1, 0.1, 5),
            np.full(5, 3.0),
        ])
        cloud = sm.PointCloud(np.vstack([pts, outliers]), frame_id="M1")
        assert stem_height(cloud) == pytest.approx(0.89, abs=0.01)

    def test_degenerate_span_returns_zero(self, rng):
        pts = np.column_stack([rng.uniform(0, 1, 100), rng.uniform(0, 1, 100),
                               np.full(100, 0.5)])
        assert stem_height(sm.PointCloud(pts, frame_id="M1")) == 0.0

    def test_too_few_points(self, rng):
        cloud = sm.PointCloud(rng.normal(size=(10, 3)), frame_id="M1")
        with pytest.raises(SapmapError, match="50"):
            stem_height(cloud)

    def test_invariant_under_horizontal_motion(self, rng):
        pts = uniform_slab(rng)
        base = stem_height(sm.PointCloud(pts, frame_id="M1"))
        moved = pts + np.array([12.0, -7.0, 0.0])
        assert stem_height(sm.PointCloud(moved, frame_id="M1")) == \
            pytest.approx(base, abs=1e-12)
        lifted = pts + np.array([0.0, 0.0, 3.5])
        assert stem_height(sm.PointCloud(lifted, frame_id="M1")) == \
            pytest.approx(base, abs=1e-12)

    def test_percentile_mode(self, rng):
        cloud = sm.PointCloud(uniform_slab(rng), frame_id="M1")
        h = stem_height(cloud, percentile_mode=True)
        assert 0.85 < h < 0.89


def direct_kde(z, bandwidth, at):
    """Independent brute-force KDE evaluation used as the oracle."""
    total = 0.0
    for zi in z:
        total += math.exp(-0.5 * ((at - zi) / bandwidth) ** 2)
    return total / (len(z) * bandwidth * math.sqrt(2 * math.pi))


class TestLeafProfile:
    def test_narrow_cluster_peaks_at_center(self, rng):
        z = 1.0 + rng.uniform(-0.0005, 0.0005, 400)
        pts = np.column_stack([np.zeros(400), np.zeros(400), z])
        profile = leaf_profile(sm.PointCloud(pts, frame_id="M1"))
        assert profile.integral() == pytest.approx(1.0, abs=1e-6)
        peak_z = profile.heights[np.argmax(profile.density)]
        assert abs(peak_z - 1.0) <= 0.001

    def test_bimodal_clusters(self, rng):
        z = np.concatenate([rng.normal(0.5, 0.02, 3000),
                            rng.normal(1.5, 0.02, 3000)])
        pts = np.column_stack([np.zeros_like(z), np.zeros_like(z), z])
        profile = leaf_profile(sm.PointCloud(pts, frame_id="M1"))
        assert profile.integral() == pytest.approx(1.0, abs=1e-6)

        bin_width = profile.heights[1] - profile.heights[0]
        lo_region = profile.density[np.abs(profile.heights - 0.5) < 0.1]
        hi_region = profile.density[np.abs(profile.heights - 1.5) < 0.1]
        lo_peak = profile.heights[np.abs(profile.heights - 0.5) < 0.1][
            np.argmax(lo_region)]
        hi_peak = profile.heights[np.abs(profile.heights - 1.5) < 0.1][
            np.argmax(hi_region)]
        assert abs(lo_peak - 0.5) <= bin_width
        assert abs(hi_peak - 1.5) <= bin_width

        # oracle: direct KDE summation at the peak candidates agrees
        for at in (lo_peak, hi_peak):
            expected = direct_kde(z, profile.bandwidth, at)
            renorm = np.trapezoid(profile.density, profile.heights)
            got = profile.density[np.argmin(np.abs(profile.heights - at))]
            assert got == pytest.approx(expected / max(renorm, 1e-300), rel=0.02)

        # equal mass within 2%
        mid = len(profile.heights) // 2
        mass_lo = np.trapezoid(profile.density[:mid], profile.heights[:mid])
        mass_hi = np.trapezoid(profile.density[mid:], profile.heights[mid:])
        assert abs(mass_lo - mass_hi) <= 0.02

    def test_uniform_density_flat(self, rng):
        z = rng.uniform(0.0, 1.0, 10_000)
        pts = np.column_stack([np.zeros_like(z), np.zeros_like(z), z])
        profile = leaf_profile(sm.PointCloud(pts, frame_id="M1"))
        central = (profile.heights > 0.1) & (profile.heights < 0.9)
        assert np.all(np.abs(profile.density[central] - 1.0) < 0.1)

    def test_degenerate_spread_warns(self):
        pts = np.column_stack([np.zeros(10), np.zeros(10), np.full(10, 1.0)])
        with pytest.warns(UserWarning, match="degenerate"):
            profile = leaf_profile(sm.PointCloud(pts, frame_id="M1"))
        assert profile.integral() == pytest.approx(1.0, abs=1e-6)

    def test_requires_two_points(self):
        cloud = sm.PointCloud(np.array([[0.0, 0, 0.5]]), frame_id="M1")
        with pytest.raises(SapmapError):
            leaf_profile(cloud)

    def test_integral_always_one(self, rng):
        for _ in range(10):
            n = int(rng.integers(2, 2000))
            z = rng.normal(rng.uniform(-3, 3), rng.uniform(0.001, 2.0), n)
            pts = np.column_stack([np.zeros(n), np.zeros(n), z])
            if z.max() - z.min() <= 0:
                continue
            profile = leaf_profile(sm.PointCloud(pts, frame_id="M1"))
            assert profile.integral() == pytest.approx(1.0, abs=1e-6)

    def test_resample_keeps_unit_integral(self, rng):
        z = rng.normal(1.0, 0.2, 2000)
        pts = np.column_stack([np.zeros_like(z), np.zeros_like(z), z])
        profile = leaf_profile(sm.PointCloud(pts, frame_id="M1"))
        grid = np.linspace(0.0, 3.0, 200)
        values = resample_profile(profile, grid)
        assert np.trapezoid(values, grid) == pytest.approx(1.0, abs=1e-9)


def build_segmentation(cloud, sap=None, skel=None):
    if skel is None:
        skel = skeletonize(cloud, voxel=None,
                           topology=TopologyParams(sample_radius_fraction=0.012),
                           prune_graph=False)
    return segment_leaf_wood(cloud, skel,
                             LeafWoodParams(terminal_radius=0.042))


class TestComputeTraits:
    def test_synthetic_sapling_end_to_end(self):
        spec = sm.synth.default_sapling_spec(1)
        sap = sm.generate(spec)
        skel = skeletonize(sap.cloud, voxel=0.005)
        seg = build_segmentation(sap.cloud)
        earth = EarthTransform(0.3, np.array([50.0, 20.0]), ANCHOR, 0.0)
        report = compute_traits(sap.cloud, skel, seg, earth,
                                sapling_id="s1", session_id="A")
        assert abs(report.height - sap.true_height) <= 0.01
        assert report.bifurcations == sap.true_bifurcations
        assert abs(report.lwr - sap.true_lwr) <= 0.10 * sap.true_lwr
        assert report.leaf_profile.integral() == pytest.approx(1.0, abs=1e-6)
        assert math.isfinite(report.geo[0]) and math.isfinite(report.geo[1])

    def test_bare_cylinder(self, rng):
        spec = SaplingSpec(seed=5, stem_height=0.8, stem_radius=0.01,
                           branches=(), leaves_per_branch_tip=0,
                           density=40_000 / (2 * np.pi * 0.01 * 0.8) * 0.5)
        sap = sm.generate(spec)
        skel = skeletonize(sap.cloud, voxel=0.005)
        over = skeletonize(sap.cloud, voxel=None,
                           topology=TopologyParams(sample_radius_fraction=0.005),
                           prune_graph=False)
        seg = segment_leaf_wood(sap.cloud, over,
                                LeafWoodParams(terminal_radius=0.042))
        report = compute_traits(sap.cloud, skel, seg, None, "s", "A")
        assert report.lwr <= 0.05
        assert report.bifurcations == 0
        assert math.isnan(report.geo[0])

    def test_report_serialisation_roundtrip(self):
        spec = sm.synth.default_sapling_spec(0)
        sap = sm.generate(spec)
        skel = skeletonize(sap.cloud, voxel=0.005)
        seg = build_segmentation(sap.cloud)
        earth = EarthTransform(0.3, np.array([50.0, 20.0]), ANCHOR, 0.0)
        report = compute_traits(sap.cloud, skel, seg, earth, "s7", "B")

        values = parse_report(format_report(report))
        assert values["sapling_id"] == "s7"
        assert values["session_id"] == "B"
        assert values["height_m"] == report.height
        assert values["bifurcations"] == report.bifurcations
        assert values["lwr"] == report.lwr
        assert values["n_leaf"] == report.n_leaf
        assert values["n_wood"] == report.n_wood
        assert values["lat"] == report.geo[0]
        assert values["lon"] == report.geo[1]

        profile = parse_profile(format_profile(report.leaf_profile))
        np.testing.assert_array_equal(profile.heights,
                                      report.leaf_profile.heights)
        np.testing.assert_array_equal(profile.density,
                                      report.leaf_profile.density)

    def test_empty_profile_roundtrip(self):
        text = format_profile(None)
        assert parse_profile(text) is None


class TestLeafProfileType:
    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            LeafProfile(np.zeros(10), np.zeros(10), 0.1)

    def test_rejects_negative_density(self):
        heights = np.linspace(0, 1, 200)
        density = np.full(200, 1.0)
        density[3] = -0.5
        with pytest.raises(ValueError):
            LeafProfile(heights, density, 0.1)
