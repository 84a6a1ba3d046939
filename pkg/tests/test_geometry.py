"""Geometry unit tests: interpolation, point-to-path distance, and
deviation detection checked against brute-force dense-sampling oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from navflywheel.geometry import (
    DEFAULT_SPACING,
    GeometryError,
    InterpolatedPath,
    Point2,
    Trajectory,
    detect_deviation,
    interpolate,
    point_to_path,
)


def brute_min_distance(p, oracle_points, spacing):
    """Dense-sampling distance oracle: resample every segment at ``spacing``
    with ceil subdivision and take the plain argmin over all samples."""
    samples = [np.asarray(oracle_points[0], dtype=float)]
    for a, b in zip(oracle_points, oracle_points[1:]):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        n = max(1, math.ceil(np.linalg.norm(b - a) / spacing))
        for t in np.linspace(0.0, 1.0, n + 1)[1:]:
            samples.append(a + t * (b - a))
    samples = np.array(samples)
    d = np.linalg.norm(samples - np.asarray([p.x, p.y]), axis=1)
    return float(np.min(d))


def brute_deviation_index(executed, oracle, threshold, spacing):
    """First-crossing oracle using the dense distance oracle above."""
    for i in range(len(executed.points)):
        p = Point2(*map(float, executed.points[i]))
        if brute_min_distance(p, oracle.points, spacing) > threshold:
            return i + 1
    return None


def random_pair(rng):
    n_oracle = rng.integers(2, 8)
    oracle_pts = np.cumsum(rng.uniform(-2, 2, size=(n_oracle, 2)), axis=0)
    while np.any(np.all(np.diff(oracle_pts, axis=0) == 0, axis=1)):
        oracle_pts += rng.normal(0, 1e-6, oracle_pts.shape)
    n_exec = rng.integers(1, 12)
    executed_pts = oracle_pts[0] + np.cumsum(rng.uniform(-1.5, 1.5, size=(n_exec, 2)), axis=0)
    return Trajectory(executed_pts), Trajectory(oracle_pts, kind="oracle")


class TestPoint2:
    def test_distance(self):
        assert Point2(0, 0).distance_to(Point2(3, 4)) == 5.0

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(GeometryError):
            Point2(bad, 0.0)


class TestTrajectory:
    def test_one_based_accessor(self):
        t = Trajectory([[0, 0], [1, 0], [1, 2]])
        assert t.point(1) == Point2(0, 0)
        assert t.point(3) == Point2(1, 2)

    def test_length(self):
        t = Trajectory([[0, 0], [3, 0], [3, 4]])
        assert t.length == pytest.approx(7.0)
        assert Trajectory([[5, 5]]).length == 0.0

    def test_oracle_rejects_consecutive_duplicates(self):
        with pytest.raises(GeometryError):
            Trajectory([[0, 0], [0, 0], [1, 1]], kind="oracle")
        # executed trajectories may stall in place
        Trajectory([[0, 0], [0, 0]], kind="executed")

    def test_rejects_empty_and_bad_kind(self):
        with pytest.raises(GeometryError):
            Trajectory(np.zeros((0, 2)))
        with pytest.raises(GeometryError):
            Trajectory([[0, 0]], kind="reference")


class TestInterpolate:
    def test_spacing_bound_and_vertices_kept(self):
        t = Trajectory([[0, 0], [1, 0], [1, 0.7]], kind="oracle")
        path = interpolate(t, 0.3)
        gaps = np.linalg.norm(np.diff(path.samples, axis=0), axis=1)
        assert np.all(gaps <= 0.3 + 1e-12)
        for v in t.points:
            assert np.min(np.linalg.norm(path.samples - v, axis=1)) < 1e-12

    def test_segment_labels_shared_vertex_goes_to_earlier_segment(self):
        t = Trajectory([[0, 0], [1, 0], [2, 0]], kind="oracle")
        path = interpolate(t, 0.5)
        # the sample sitting exactly on the middle vertex belongs to segment 1
        idx = int(np.argmin(np.linalg.norm(path.samples - np.array([1.0, 0.0]), axis=1)))
        assert path.source_segment[idx] == 1
        assert path.source_segment[0] == 1
        assert path.source_segment[-1] == 2

    def test_single_point(self):
        path = interpolate(Trajectory([[2, 3]]), 0.1)
        assert len(path) == 1 and path.source_segment[0] == 1

    def test_invalid_spacing(self):
        with pytest.raises(GeometryError):
            interpolate(Trajectory([[0, 0], [1, 1]]), 0.0)


class TestPointToPath:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            _, oracle = random_pair(rng)
            p = Point2(*rng.uniform(-4, 4, 2))
            path = interpolate(oracle, DEFAULT_SPACING)
            dist, foot, seg = point_to_path(p, path)
            assert dist == pytest.approx(
                brute_min_distance(p, oracle.points, DEFAULT_SPACING), abs=1e-12
            )
            assert 1 <= seg <= len(oracle) - 1
            assert p.distance_to(foot) == pytest.approx(dist, abs=1e-12)

    def test_tie_breaks_to_earliest_sample(self):
        path = InterpolatedPath(
            samples=np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 1.0]]),
            spacing=1.0,
            source_segment=np.array([1, 1, 2]),
        )
        # (1, 1) is equidistant from samples 0 and 2; earliest wins
        dist, foot, seg = point_to_path(Point2(1.0, 1.0), path)
        assert foot == Point2(0.0, 1.0) and seg == 1

    def test_empty_path_raises(self):
        path = InterpolatedPath(
            samples=np.zeros((0, 2)), spacing=1.0, source_segment=np.array([])
        )
        with pytest.raises(GeometryError):
            point_to_path(Point2(0, 0), path)


class TestDetectDeviation:
    def test_within_threshold_returns_none(self):
        oracle = Trajectory([[0, 0], [5, 0]], kind="oracle")
        executed = Trajectory([[0, 0.2], [2, -0.3], [5, 0.1]])
        assert detect_deviation(executed, oracle, 1.0) is None

    def test_first_crossing_semantics(self):
        oracle = Trajectory([[0, 0], [10, 0]], kind="oracle")
        executed = Trajectory([[0, 0.5], [2, 1.5], [4, 0.2], [6, 2.5]])
        report = detect_deviation(executed, oracle, 1.0)
        assert report.deviation_index == 2
        assert report.distance == pytest.approx(1.5, abs=1e-9)
        assert len(report.per_step_distances) == 2

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            executed, oracle = random_pair(rng)
            threshold = float(rng.uniform(0.3, 2.0))
            report = detect_deviation(executed, oracle, threshold, DEFAULT_SPACING)
            expected = brute_deviation_index(executed, oracle, threshold, DEFAULT_SPACING / 100)
            got = None if report is None else report.deviation_index
            # a distance nearly equal to the threshold may flip under refinement
            if report is not None and abs(report.distance - threshold) < DEFAULT_SPACING:
                continue
            assert got == expected

    def test_validation(self):
        oracle = Trajectory([[0, 0], [1, 0]], kind="oracle")
        with pytest.raises(GeometryError):
            detect_deviation(Trajectory([[0, 0]]), oracle, 0.0)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=40, deadline=None)
    def test_threshold_monotonicity(self, seed):
        # raising the threshold can only delay or suppress the deviation
        rng = np.random.default_rng(seed)
        executed, oracle = random_pair(rng)
        low = detect_deviation(executed, oracle, 0.5)
        high = detect_deviation(executed, oracle, 1.5)
        if high is not None:
            assert low is not None
            assert low.deviation_index <= high.deviation_index

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=40, deadline=None)
    def test_refinement_error_bound(self, seed):
        # sampled distance is within spacing/2 of a 100x denser oracle
        rng = np.random.default_rng(seed)
        executed, oracle = random_pair(rng)
        p = Point2(*map(float, executed.points[-1]))
        truth = brute_min_distance(p, oracle.points, 0.002)
        for spacing in (0.2, 0.1):
            d, _, _ = point_to_path(p, interpolate(oracle, spacing))
            assert truth <= d <= truth + spacing / 2
