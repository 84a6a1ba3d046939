"""Metric unit tests; DTW is checked against exhaustive alignment
enumeration and the split invariants against random episodes."""

import csv
import json
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from navflywheel.geometry import GeometryError, Point2, Trajectory
from navflywheel.metrics import (
    METRIC_COLUMNS,
    SUCCESS_RADIUS,
    EpisodeResult,
    aggregate,
    dtw,
    navigation_error,
    ndtw,
    oracle_success,
    score_episode,
    spl,
    success,
    summary_to_csv,
    summary_to_json,
)


def exhaustive_dtw(a, b):
    """Enumerate every monotone alignment path by memoized recursion.

    Feasible only for short trajectories; used as the correctness oracle
    for the dynamic program."""
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))

    @lru_cache(maxsize=None)
    def best(i, j):
        if i == 0 and j == 0:
            return float(cost[0, 0])
        options = []
        if i > 0:
            options.append(best(i - 1, j))
        if j > 0:
            options.append(best(i, j - 1))
        if i > 0 and j > 0:
            options.append(best(i - 1, j - 1))
        return float(cost[i, j]) + min(options)

    return best(len(a) - 1, len(b) - 1)


def random_episode(rng):
    n_o = rng.integers(2, 7)
    oracle_pts = np.cumsum(rng.uniform(-3, 3, size=(n_o, 2)), axis=0)
    while np.any(np.all(np.diff(oracle_pts, axis=0) == 0, axis=1)):
        oracle_pts += rng.normal(0, 1e-6, oracle_pts.shape)
    n_e = rng.integers(1, 10)
    exec_pts = np.cumsum(rng.uniform(-3, 3, size=(n_e, 2)), axis=0)
    executed = Trajectory(exec_pts)
    oracle = Trajectory(oracle_pts, kind="oracle")
    shortest = max(0.1, float(oracle.length))
    actual = float(executed.length)
    goal = Point2(*map(float, oracle_pts[-1]))
    return EpisodeResult(executed, oracle, goal, shortest, actual)


class TestPointMetrics:
    def test_navigation_error(self):
        assert navigation_error(Point2(0, 0), Point2(0, 2.5)) == 2.5

    def test_success_is_strict(self):
        assert success(SUCCESS_RADIUS) == 0
        assert success(SUCCESS_RADIUS - 1e-9) == 1
        assert success(0.0) == 1

    def test_oracle_success_any_visited_point(self):
        executed = Trajectory([[0, 0], [10, 0], [20, 0]])
        assert oracle_success(executed, Point2(10, 1)) == 1
        assert oracle_success(executed, Point2(10, 3)) == 0

    def test_spl(self):
        assert spl(1, 4.0, 8.0) == pytest.approx(0.5)
        assert spl(1, 4.0, 2.0) == pytest.approx(1.0)  # never above 1
        assert spl(0, 4.0, 4.0) == 0.0
        with pytest.raises(GeometryError):
            spl(1, 0.0, 1.0)
        with pytest.raises(GeometryError):
            spl(1, 1.0, -1.0)


class TestDTW:
    def test_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            a = rng.uniform(-5, 5, size=(rng.integers(1, 7), 2))
            b = rng.uniform(-5, 5, size=(rng.integers(1, 7), 2))
            got = dtw(Trajectory(a), Trajectory(b))
            assert got == pytest.approx(exhaustive_dtw(a, b), abs=1e-9)

    def test_identical_paths_zero_cost(self):
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
        assert dtw(Trajectory(pts), Trajectory(pts)) == 0.0

    def test_ndtw_range_and_perfect_score(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            ep = random_episode(rng)
            v = ndtw(ep.executed, ep.oracle)
            assert 0.0 < v <= 1.0
        pts = np.array([[0.0, 0.0], [1.0, 0.0]])
        assert ndtw(Trajectory(pts), Trajectory(pts, kind="oracle")) == 1.0

    def test_ndtw_validation(self):
        t = Trajectory([[0, 0], [1, 0]])
        with pytest.raises(GeometryError):
            ndtw(t, t, success_radius=0.0)


class TestEpisodeScoring:
    @given(st.integers(min_value=0, max_value=100_000))
    @settings(max_examples=60, deadline=None)
    def test_invariants(self, seed):
        ep = random_episode(np.random.default_rng(seed))
        r = score_episode(ep)
        assert r.spl <= r.success
        assert r.oracle_success >= r.success
        assert r.ne >= 0.0
        assert 0.0 < r.ndtw <= 1.0

    def test_success_uses_final_position(self):
        executed = Trajectory([[0, 0], [10, 0]])
        oracle = Trajectory([[0, 0], [10, 0]], kind="oracle")
        r = score_episode(EpisodeResult(executed, oracle, Point2(0, 0), 10.0, 10.0))
        assert r.success == 0 and r.oracle_success == 1


class TestAggregation:
    def make_summary(self):
        executed = Trajectory([[0, 0], [4, 0]])
        oracle = Trajectory([[0, 0], [4, 0]], kind="oracle")
        ep = EpisodeResult(executed, oracle, Point2(4, 0), 4.0, 4.0)
        return aggregate([score_episode(ep), score_episode(ep)])

    def test_rates_are_percentages(self):
        s = self.make_summary()
        assert s.sr == 100.0 and s.os == 100.0
        assert s.spl == pytest.approx(100.0)
        assert s.ne == 0.0

    def test_empty_aggregate_raises(self):
        with pytest.raises(GeometryError):
            aggregate([])

    def test_csv_and_json_round_trip(self, tmp_path):
        s = self.make_summary()
        summary_to_json(s, tmp_path / "m.json")
        summary_to_csv(s, tmp_path / "m.csv")
        loaded = json.loads((tmp_path / "m.json").read_text())
        assert loaded == s.as_row()
        with open(tmp_path / "m.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0].keys()) == METRIC_COLUMNS
        assert float(rows[0]["sr"]) == s.sr
