"""Continuous-navigation evaluation metrics: navigation error, success,
oracle success, path-length-weighted success, and normalized DTW path
similarity."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np

from .geometry import GeometryError, Point2, Trajectory

SUCCESS_RADIUS = 3.0

METRIC_COLUMNS = ["ne", "sr", "os", "spl", "ndtw"]


@dataclass(frozen=True)
class EpisodeResult:
    """Inputs needed to score one episode."""

    executed: Trajectory
    oracle: Trajectory
    goal: Point2
    shortest_path_length: float
    actual_path_length: float
    stopped: bool = True


@dataclass(frozen=True)
class MetricReport:
    ne: float
    success: int
    oracle_success: int
    spl: float
    ndtw: float


def navigation_error(final: Point2, goal: Point2) -> float:
    """Euclidean distance from the final position to the goal."""
    return final.distance_to(goal)


def success(ne: float, radius: float = SUCCESS_RADIUS) -> int:
    """1 iff the navigation error is strictly below the success radius."""
    return 1 if ne < radius else 0


def oracle_success(executed: Trajectory, goal: Point2, radius: float = SUCCESS_RADIUS) -> int:
    """Success under an oracle stop policy: 1 iff any visited position is
    strictly within the radius of the goal."""
    d = np.linalg.norm(executed.points - goal.to_array(), axis=1)
    return 1 if float(np.min(d)) < radius else 0


def spl(success_flag: int, shortest: float, actual: float) -> float:
    """Success weighted by path length: success * shortest / max(shortest, actual)."""
    if shortest <= 0:
        raise GeometryError(f"shortest path length must be positive, got {shortest}")
    if actual < 0:
        raise GeometryError(f"actual path length must be non-negative, got {actual}")
    return float(success_flag) * shortest / max(shortest, actual)


def dtw(executed: Trajectory, oracle: Trajectory) -> float:
    """Dynamic-time-warping cost between two trajectories under Euclidean
    pointwise cost, via the standard O(n*m) dynamic program."""
    a, b = executed.points, oracle.points
    n, m = len(a), len(b)
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(
                acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1]
            )
    return float(acc[n, m])


def ndtw(executed: Trajectory, oracle: Trajectory, success_radius: float = SUCCESS_RADIUS) -> float:
    """exp(-DTW / (|oracle| * radius)); 1.0 means pointwise-identical paths.

    |oracle| counts the oracle reference points, not interpolated samples.
    """
    if len(executed) < 1 or len(oracle) < 1:
        raise GeometryError("trajectories must be non-empty")
    if success_radius <= 0:
        raise GeometryError(f"success radius must be positive, got {success_radius}")
    return float(np.exp(-dtw(executed, oracle) / (len(oracle) * success_radius)))


def score_episode(result: EpisodeResult, radius: float = SUCCESS_RADIUS) -> MetricReport:
    """Compute all metrics for one episode."""
    final = result.executed.point(len(result.executed))
    ne = navigation_error(final, result.goal)
    sr = success(ne, radius)
    return MetricReport(
        ne=ne,
        success=sr,
        oracle_success=oracle_success(result.executed, result.goal, radius),
        spl=spl(sr, result.shortest_path_length, result.actual_path_length),
        ndtw=ndtw(result.executed, result.oracle, radius),
    )


@dataclass(frozen=True)
class MetricSummary:
    """Split-level aggregate; sr/os/spl/ndtw are percentages, ne in meters."""

    ne: float
    sr: float
    os: float
    spl: float
    ndtw: float

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_COLUMNS}


def aggregate(reports: list) -> MetricSummary:
    """Arithmetic means over per-episode reports; rate metrics as percent."""
    if not reports:
        raise GeometryError("cannot aggregate an empty report list")
    return MetricSummary(
        ne=float(np.mean([r.ne for r in reports])),
        sr=100.0 * float(np.mean([r.success for r in reports])),
        os=100.0 * float(np.mean([r.oracle_success for r in reports])),
        spl=100.0 * float(np.mean([r.spl for r in reports])),
        ndtw=100.0 * float(np.mean([r.ndtw for r in reports])),
    )


def summary_to_json(summary: MetricSummary, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary.as_row(), fh, indent=2)
        fh.write("\n")


def summary_to_csv(summary: MetricSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerow(summary.as_row())
