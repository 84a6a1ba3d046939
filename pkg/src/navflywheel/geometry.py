"""Polyline geometry: path interpolation, point-to-path distance, and
first-crossing deviation detection between an executed trajectory and its
reference path."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SPACING = 0.05
DEFAULT_THRESHOLD = 1.0


class GeometryError(ValueError):
    """Invalid geometric input."""


@dataclass(frozen=True)
class Point2:
    """A finite 2-D position in meters."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    def distance_to(self, other: "Point2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def _as_points_array(points) -> np.ndarray:
    arr = np.asarray(
        [[p.x, p.y] if isinstance(p, Point2) else p for p in points], dtype=float
    )
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError(f"expected (N, 2) point array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("trajectory contains non-finite coordinates")
    return arr


@dataclass(frozen=True)
class Trajectory:
    """Ordered 2-D positions in meters.

    ``kind`` is "oracle" for reference paths or "executed" for rollout
    traces; only executed trajectories may contain consecutive duplicate
    points (a stalled agent).
    """

    points: np.ndarray
    kind: str = "executed"

    def __post_init__(self):
        arr = _as_points_array(self.points)
        object.__setattr__(self, "points", arr)
        if self.kind not in ("oracle", "executed"):
            raise GeometryError(f"unknown trajectory kind {self.kind!r}")
        if len(arr) < 1:
            raise GeometryError("trajectory must contain at least one point")
        if self.kind == "oracle" and len(arr) > 1:
            dup = np.all(arr[1:] == arr[:-1], axis=1)
            if np.any(dup):
                raise GeometryError("oracle trajectory has duplicate consecutive points")

    def __len__(self) -> int:
        return len(self.points)

    def point(self, index: int) -> Point2:
        """1-based accessor."""
        x, y = self.points[index - 1]
        return Point2(float(x), float(y))

    @property
    def length(self) -> float:
        """Total polyline length in meters."""
        if len(self.points) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


@dataclass(frozen=True)
class InterpolatedPath:
    """Evenly resampled polyline; every sample carries the 1-based index of
    the original segment it lies on (shared vertices go to the earlier
    segment)."""

    samples: np.ndarray
    spacing: float
    source_segment: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class DeviationReport:
    """First executed timestep whose distance to the reference path exceeds
    the threshold, with all earlier timesteps within it.

    ``deviation_index`` and ``segment_index`` are 1-based; ``foot`` is the
    nearest interpolated sample to the deviating position.
    """

    deviation_index: int
    distance: float
    foot: Point2
    segment_index: int
    per_step_distances: list = field(default_factory=list)


def interpolate(traj: Trajectory, spacing: float) -> InterpolatedPath:
    """Resample a trajectory so consecutive samples are at most ``spacing``
    apart while keeping every original vertex."""
    if spacing <= 0:
        raise GeometryError(f"spacing must be positive, got {spacing}")
    pts = traj.points
    if len(pts) == 1:
        return InterpolatedPath(
            samples=pts.copy(), spacing=spacing, source_segment=np.array([1])
        )
    samples = [pts[0]]
    segs = [1]
    for k in range(len(pts) - 1):
        a, b = pts[k], pts[k + 1]
        seg_len = float(np.linalg.norm(b - a))
        n_sub = max(1, math.ceil(seg_len / spacing))
        ts = np.linspace(0.0, 1.0, n_sub + 1)[1:]
        for t in ts:
            samples.append(a + t * (b - a))
            segs.append(k + 1)
    return InterpolatedPath(
        samples=np.array(samples), spacing=spacing, source_segment=np.array(segs)
    )


def point_to_path(p: Point2, path: InterpolatedPath):
    """Minimum Euclidean distance from ``p`` to the sampled path.

    Returns ``(distance, foot, segment_index)``; ties break toward the
    earliest sample.
    """
    if len(path) == 0:
        raise GeometryError("empty interpolated path")
    target = p.to_array() if isinstance(p, Point2) else np.asarray(p, dtype=float)
    d2 = np.sum((path.samples - target) ** 2, axis=1)
    i = int(np.argmin(d2))  # argmin returns the first minimum
    foot = Point2(float(path.samples[i, 0]), float(path.samples[i, 1]))
    return float(math.sqrt(d2[i])), foot, int(path.source_segment[i])


def detect_deviation(
    executed: Trajectory,
    oracle: Trajectory,
    threshold_S: float = DEFAULT_THRESHOLD,
    spacing: float = DEFAULT_SPACING,
) -> DeviationReport | None:
    """Find the first executed timestep t with distance-to-path > threshold
    while every earlier timestep stayed within it; None when the whole
    trajectory stays within the threshold."""
    if len(executed) < 1 or len(oracle) < 1:
        raise GeometryError("trajectories must be non-empty")
    if threshold_S <= 0:
        raise GeometryError(f"threshold must be positive, got {threshold_S}")
    path = interpolate(oracle, spacing)
    dists: list[float] = []
    for i in range(1, len(executed) + 1):
        dist, foot, seg = point_to_path(executed.point(i), path)
        dists.append(dist)
        if dist > threshold_S:
            return DeviationReport(
                deviation_index=i,
                distance=dist,
                foot=foot,
                segment_index=seg,
                per_step_distances=dists,
            )
    return None
