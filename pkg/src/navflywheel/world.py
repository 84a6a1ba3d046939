"""Deterministic, seedable continuous-pose navigation environment over an
occupancy grid, with symbolic landmark observations and observation-noise
knobs (visibility range, bearing jitter, landmark dropout, distance-bin
noise)."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Point2, Trajectory
from . import metrics as metrics_mod

TWO_PI = 2.0 * math.pi

LANDMARK_NAMES = ["door", "chair", "table", "lamp", "plant", "shelf"]
LANDMARK_COLORS = ["red", "blue", "green", "yellow", "white", "black"]

BEARING_BINS = [
    "ahead",
    "ahead_left",
    "left",
    "behind_left",
    "behind",
    "behind_right",
    "right",
    "ahead_right",
]
DISTANCE_BINS = ["near", "mid", "far"]

DEFAULT_FORWARD_STEP = 0.25
DEFAULT_TURN_STEP = math.radians(15.0)

ACTION_KINDS = ["FORWARD", "TURN_LEFT", "TURN_RIGHT", "STOP"]


class WorldError(ValueError):
    """Invalid world or pose input."""


class GenerationError(RuntimeError):
    """World generation could not satisfy its constraints."""


@dataclass(frozen=True)
class Action:
    kind: str
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise WorldError(f"unknown action kind {self.kind!r}")
        if self.kind == "FORWARD" and self.magnitude <= 0:
            raise WorldError("forward step must be positive")
        if self.kind in ("TURN_LEFT", "TURN_RIGHT") and self.magnitude <= 0:
            raise WorldError("turn angle must be positive")


def forward(step: float = DEFAULT_FORWARD_STEP) -> Action:
    return Action("FORWARD", step)


def turn_left(angle: float = DEFAULT_TURN_STEP) -> Action:
    return Action("TURN_LEFT", angle)


def turn_right(angle: float = DEFAULT_TURN_STEP) -> Action:
    return Action("TURN_RIGHT", angle)


def stop() -> Action:
    return Action("STOP", 0.0)


@dataclass(frozen=True)
class Landmark:
    id: int
    name: str
    color: str
    position: Point2


@dataclass(frozen=True)
class WorldSpec:
    """Occupancy grid (True = blocked) plus named, colored point landmarks.

    Grid indexing is ``grid[row, col]`` with row 0 at y = 0; world
    coordinates span ``[0, width_m] x [0, height_m]``.
    """

    grid: np.ndarray
    cell_size: float
    landmarks: tuple
    seed: int = 0

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=bool)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "landmarks", tuple(self.landmarks))
        if grid.ndim != 2 or grid.size == 0:
            raise WorldError("grid must be a non-empty 2-D bitmap")
        if self.cell_size <= 0:
            raise WorldError("cell size must be positive")

    @property
    def bounds(self) -> tuple:
        """(width_m, height_m)."""
        rows, cols = self.grid.shape
        return (cols * self.cell_size, rows * self.cell_size)

    def cell_of(self, p: Point2) -> tuple:
        """(row, col) containing p; may fall outside the grid."""
        return (int(math.floor(p.y / self.cell_size)), int(math.floor(p.x / self.cell_size)))

    def cell_center(self, row: int, col: int) -> Point2:
        return Point2((col + 0.5) * self.cell_size, (row + 0.5) * self.cell_size)

    def in_bounds(self, p: Point2) -> bool:
        w, h = self.bounds
        return 0.0 <= p.x < w and 0.0 <= p.y < h

    def is_free(self, p: Point2) -> bool:
        if not self.in_bounds(p):
            return False
        row, col = self.cell_of(p)
        return not bool(self.grid[row, col])

    def segment_clear(self, a: Point2, b: Point2) -> bool:
        """True when the straight segment a->b stays in free space,
        sampled at cell_size / 10 increments."""
        d = math.hypot(b.x - a.x, b.y - a.y)
        n = max(1, int(math.ceil(d / (self.cell_size / 10.0))))
        ts = np.linspace(0.0, 1.0, n + 1)
        xs = a.x + ts * (b.x - a.x)
        ys = a.y + ts * (b.y - a.y)
        w, h = self.bounds
        if xs.min() < 0 or ys.min() < 0 or xs.max() >= w or ys.max() >= h:
            return False
        rows = np.floor(ys / self.cell_size).astype(int)
        cols = np.floor(xs / self.cell_size).astype(int)
        return not bool(self.grid[rows, cols].any())


@dataclass(frozen=True)
class Pose:
    position: Point2
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", self.heading % TWO_PI)


@dataclass(frozen=True)
class VisibleLandmark:
    landmark_id: int
    name: str
    color: str
    bearing_bin: str
    distance_bin: str


@dataclass(frozen=True)
class Observation:
    """Visible landmarks plus an 8-sector local obstacle probe (True =
    blocked within the probe range, sectors ordered like BEARING_BINS)."""

    visible: tuple
    timestamp: int = 0
    blocked: tuple = (False,) * 8

    def __post_init__(self):
        object.__setattr__(self, "visible", tuple(self.visible))
        object.__setattr__(self, "blocked", tuple(bool(b) for b in self.blocked))


OBSTACLE_PROBE_RANGE = 1.0


@dataclass(frozen=True)
class RandomizationConfig:
    visibility_range: float = 8.0
    bearing_jitter: float = 0.0
    landmark_dropout: float = 0.0
    distance_bin_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.visibility_range <= 0:
            raise WorldError("visibility range must be positive")
        for p in (self.landmark_dropout, self.distance_bin_noise):
            if not 0.0 <= p <= 1.0:
                raise WorldError("probabilities must lie in [0, 1]")


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = (a + math.pi) % TWO_PI - math.pi
    return math.pi if a == -math.pi else a


def bearing_bin_of(relative_bearing: float) -> str:
    sector = int(math.floor((wrap_angle(relative_bearing) + math.pi / 8) / (math.pi / 4))) % 8
    return BEARING_BINS[sector]


def distance_bin_of(distance: float, visibility_range: float) -> str:
    third = visibility_range / 3.0
    if distance < third:
        return "near"
    if distance < 2 * third:
        return "mid"
    return "far"


def _flood_fill_free(occupied: np.ndarray, start: tuple) -> np.ndarray:
    """4-connected reachability mask over free cells."""
    rows, cols = occupied.shape
    reach = np.zeros_like(occupied, dtype=bool)
    stack = [start]
    reach[start] = True
    while stack:
        r, c = stack.pop()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < rows and 0 <= nc < cols and not occupied[nr, nc] and not reach[nr, nc]:
                reach[nr, nc] = True
                stack.append((nr, nc))
    return reach


def generate_world(
    seed: int,
    size: int = 20,
    obstacle_density: float = 0.1,
    landmark_count: int = 4,
    cell_size: float = 0.5,
    max_attempts: int = 20,
) -> WorldSpec:
    """Random connected world: scatter obstacles, keep the largest connected
    free region (filling the rest), then drop landmarks on distinct free
    cells with distinct (name, color) pairs."""
    if not 0.0 <= obstacle_density <= 0.4:
        raise WorldError("obstacle density must lie in [0, 0.4]")
    if landmark_count < 1:
        raise WorldError("need at least one landmark")
    if landmark_count > len(LANDMARK_NAMES) * len(LANDMARK_COLORS):
        raise WorldError("not enough distinct (name, color) pairs")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        occupied = rng.random((size, size)) < obstacle_density
        free_cells = np.argwhere(~occupied)
        if len(free_cells) < landmark_count + 2:
            continue
        # keep the largest connected free component, wall off the rest
        best_reach = None
        seen = np.zeros_like(occupied, dtype=bool)
        for r, c in free_cells:
            if seen[r, c]:
                continue
            reach = _flood_fill_free(occupied, (int(r), int(c)))
            seen |= reach
            if best_reach is None or reach.sum() > best_reach.sum():
                best_reach = reach
        occupied = ~best_reach
        free_cells = np.argwhere(best_reach)
        if len(free_cells) < landmark_count + 2:
            continue
        pair_idx = rng.choice(
            len(LANDMARK_NAMES) * len(LANDMARK_COLORS), size=landmark_count, replace=False
        )
        cell_idx = rng.choice(len(free_cells), size=landmark_count, replace=False)
        world = WorldSpec(grid=occupied, cell_size=cell_size, landmarks=(), seed=seed)
        landmarks = []
        for lid, (pi, ci) in enumerate(zip(pair_idx, cell_idx)):
            name = LANDMARK_NAMES[int(pi) % len(LANDMARK_NAMES)]
            color = LANDMARK_COLORS[int(pi) // len(LANDMARK_NAMES)]
            row, col = free_cells[ci]
            landmarks.append(
                Landmark(id=lid, name=name, color=color, position=world.cell_center(int(row), int(col)))
            )
        return replace(world, landmarks=tuple(landmarks))
    raise GenerationError(
        f"could not generate a valid world after {max_attempts} attempts (seed={seed})"
    )


def step(pose: Pose, action: Action, world: WorldSpec):
    """Apply one action; a blocked FORWARD leaves the pose unchanged and
    reports a collision. Returns (pose, collided)."""
    if action.kind == "STOP":
        return pose, False
    if action.kind == "TURN_LEFT":
        return Pose(pose.position, pose.heading + action.magnitude), False
    if action.kind == "TURN_RIGHT":
        return Pose(pose.position, pose.heading - action.magnitude), False
    target = Point2(
        pose.position.x + action.magnitude * math.cos(pose.heading),
        pose.position.y + action.magnitude * math.sin(pose.heading),
    )
    if not world.in_bounds(target) or not world.segment_clear(pose.position, target):
        return pose, True
    return Pose(target, pose.heading), False


def observe(
    pose: Pose,
    world: WorldSpec,
    randcfg: RandomizationConfig,
    rng: np.random.Generator,
    timestep: int = 0,
) -> Observation:
    """Symbolic observation: every unoccluded landmark within visibility
    range, binned by relative bearing and distance, then degraded by the
    configured noise."""
    visible = []
    for lm in world.landmarks:
        d = pose.position.distance_to(lm.position)
        if d > randcfg.visibility_range:
            continue
        if not world.segment_clear(pose.position, lm.position):
            continue
        if randcfg.landmark_dropout > 0 and rng.random() < randcfg.landmark_dropout:
            continue
        bearing = math.atan2(
            lm.position.y - pose.position.y, lm.position.x - pose.position.x
        ) - pose.heading
        if randcfg.bearing_jitter > 0:
            bearing += rng.normal(0.0, randcfg.bearing_jitter)
        dist_bin = distance_bin_of(d, randcfg.visibility_range)
        if randcfg.distance_bin_noise > 0 and rng.random() < randcfg.distance_bin_noise:
            i = DISTANCE_BINS.index(dist_bin)
            i += 1 if rng.random() < 0.5 else -1
            dist_bin = DISTANCE_BINS[min(max(i, 0), len(DISTANCE_BINS) - 1)]
        visible.append(
            VisibleLandmark(
                landmark_id=lm.id,
                name=lm.name,
                color=lm.color,
                bearing_bin=bearing_bin_of(bearing),
                distance_bin=dist_bin,
            )
        )
    blocked = []
    for i in range(len(BEARING_BINS)):
        angle = pose.heading + i * (math.pi / 4)
        probe = Point2(
            pose.position.x + OBSTACLE_PROBE_RANGE * math.cos(angle),
            pose.position.y + OBSTACLE_PROBE_RANGE * math.sin(angle),
        )
        blocked.append(
            not world.in_bounds(probe) or not world.segment_clear(pose.position, probe)
        )
    return Observation(visible=tuple(visible), timestamp=timestep, blocked=tuple(blocked))


def episode_rng(base_seed: int, episode_id: str) -> np.random.Generator:
    """Private, reproducible RNG stream for one episode."""
    digest = hashlib.sha256(episode_id.encode()).digest()
    return np.random.default_rng(
        np.random.SeedSequence([base_seed, int.from_bytes(digest[:8], "little")])
    )


@dataclass
class RolloutResult:
    trajectory: Trajectory
    observations: list
    actions: list
    poses: list
    metrics: object = None
    failed: bool = False
    error: str = ""

    @property
    def stopped(self) -> bool:
        return bool(self.actions) and self.actions[-1].kind == "STOP"


def replay_actions(
    start_pose: Pose,
    actions: list,
    world: WorldSpec,
    randcfg: RandomizationConfig | None = None,
    rng: np.random.Generator | None = None,
):
    """Execute a fixed action sequence, returning (poses, observations).

    poses[0] is the start pose; observations[i] is taken at poses[i].
    With randcfg None, observations are noise-free at the default range.
    """
    if randcfg is None:
        randcfg = RandomizationConfig()
    if rng is None:
        rng = np.random.default_rng(randcfg.seed)
    poses = [start_pose]
    observations = [observe(start_pose, world, randcfg, rng, timestep=0)]
    pose = start_pose
    for i, action in enumerate(actions):
        pose, _ = step(pose, action, world)
        poses.append(pose)
        observations.append(observe(pose, world, randcfg, rng, timestep=i + 1))
    return poses, observations


def rollout(
    policy,
    episode,
    world: WorldSpec,
    randcfg: RandomizationConfig,
    max_steps: int = 200,
) -> RolloutResult:
    """Run a policy on one episode: query a 4-action chunk over the 16 most
    recent observations, execute it, repeat until STOP or the step cap.

    A policy exception marks the episode failed instead of raising.
    """
    if max_steps <= 0:
        raise WorldError("max_steps must be positive")
    rng = episode_rng(randcfg.seed, episode.id)
    pose = episode.start_pose
    poses = [pose]
    positions = [pose.position]
    observations = [observe(pose, world, randcfg, rng, timestep=0)]
    actions: list[Action] = []
    failed = False
    error = ""
    done = False
    while not done and len(actions) < max_steps:
        try:
            chunk = policy.predict(episode.instruction, observations[-16:], actions[-4:])
        except Exception as exc:  # policy bugs must not kill the split
            failed = True
            error = f"{type(exc).__name__}: {exc}"
            break
        if not chunk:
            break
        for action in chunk:
            pose, _ = step(pose, action, world)
            actions.append(action)
            poses.append(pose)
            positions.append(pose.position)
            observations.append(observe(pose, world, randcfg, rng, timestep=len(actions)))
            if action.kind == "STOP" or len(actions) >= max_steps:
                done = action.kind == "STOP" or len(actions) >= max_steps
                break
    executed = Trajectory(np.array([[p.x, p.y] for p in positions]), kind="executed")
    oracle = Trajectory(episode.reference_points, kind="oracle")
    result = metrics_mod.EpisodeResult(
        executed=executed,
        oracle=oracle,
        goal=episode.goal,
        shortest_path_length=episode.shortest_path_length,
        actual_path_length=executed.length,
        stopped=bool(actions) and actions[-1].kind == "STOP",
    )
    report = metrics_mod.score_episode(result)
    return RolloutResult(
        trajectory=executed,
        observations=observations,
        actions=actions,
        poses=poses,
        metrics=report,
        failed=failed,
        error=error,
    )


def _rle_encode(bits: np.ndarray) -> str:
    """Run lengths of a flat bit array, alternating and starting with 0-runs."""
    runs = []
    current = False
    count = 0
    for b in bits:
        if bool(b) == current:
            count += 1
        else:
            runs.append(count)
            current = bool(b)
            count = 1
    runs.append(count)
    return ",".join(str(r) for r in runs)


def _rle_decode(encoded: str, size: int) -> np.ndarray:
    bits = np.zeros(size, dtype=bool)
    pos = 0
    value = False
    for token in encoded.split(","):
        run = int(token)
        bits[pos : pos + run] = value
        pos += run
        value = not value
    if pos != size:
        raise WorldError(f"run-length data covers {pos} cells, expected {size}")
    return bits


def world_to_json(world: WorldSpec) -> str:
    rows, cols = world.grid.shape
    payload = {
        "rows": rows,
        "cols": cols,
        "cell_size": world.cell_size,
        "seed": world.seed,
        "grid_rle": _rle_encode(world.grid.ravel()),
        "landmarks": [
            {
                "id": lm.id,
                "name": lm.name,
                "color": lm.color,
                "x": lm.position.x,
                "y": lm.position.y,
            }
            for lm in world.landmarks
        ],
    }
    return json.dumps(payload, indent=2)


def world_from_json(text: str) -> WorldSpec:
    payload = json.loads(text)
    grid = _rle_decode(payload["grid_rle"], payload["rows"] * payload["cols"]).reshape(
        payload["rows"], payload["cols"]
    )
    landmarks = tuple(
        Landmark(id=lm["id"], name=lm["name"], color=lm["color"], position=Point2(lm["x"], lm["y"]))
        for lm in payload["landmarks"]
    )
    return WorldSpec(
        grid=grid, cell_size=payload["cell_size"], landmarks=landmarks, seed=payload.get("seed", 0)
    )
