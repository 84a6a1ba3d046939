"""Dataset construction: oracle episodes with templated instructions,
step-wise action-prediction samples, error-correcting trajectories with
keyframe perception data, and the correction/oracle mixing rule."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import DeviationReport, Point2, Trajectory, interpolate
from .planner import NoPathError, PlannedPath, path_to_actions, plan, plan_through
from .policy import (
    CHUNK_SIZE,
    InstructionSample,
    PerceptionSample,
    QA_CATEGORIES,
    TrainSample,
    tokenize,
)
from .world import (
    Action,
    Observation,
    Pose,
    RandomizationConfig,
    RolloutResult,
    VisibleLandmark,
    WorldSpec,
    episode_rng,
    observe,
    replay_actions,
)

log = logging.getLogger(__name__)

TURN_CLAUSE_THRESHOLD = math.radians(30.0)
PASS_RADIUS = 1.0
KEYFRAME_OFFSET = 1


class DataGenError(RuntimeError):
    """Dataset generation could not satisfy its constraints."""


@dataclass(frozen=True)
class EpisodeSpec:
    """One navigation task: start pose, oracle reference points, templated
    instruction, and the goal (= last reference point)."""

    id: str
    world_key: str
    start_pose: Pose
    reference_points: np.ndarray
    instruction: str
    goal: Point2
    shortest_path_length: float

    def __post_init__(self):
        object.__setattr__(
            self, "reference_points", np.asarray(self.reference_points, dtype=float)
        )


@dataclass
class CorrectionRecord:
    """Everything needed to turn one detected deviation into training data."""

    episode_id: str
    instruction: str
    iteration: int
    report: DeviationReport
    deviation_pose: Pose
    correction_path: PlannedPath
    correction_actions: list
    correction_observations: list
    history_observations: list
    history_actions: list
    keyframe_indices: list
    keyframe_windows: list
    keyframe_truth: list


@dataclass
class CorrectionBundle:
    record: CorrectionRecord
    train_samples: list
    perception_samples: list


@dataclass(frozen=True)
class EpisodeSamples:
    """Oracle training samples for one episode (the re-mix pool unit)."""

    episode_id: str
    train_samples: tuple
    instruction_sample: InstructionSample = None

    def __post_init__(self):
        object.__setattr__(self, "train_samples", tuple(self.train_samples))


@dataclass
class MixedDataset:
    correction_samples: list
    oracle_samples: list
    perception_samples: list
    instruction_samples: list
    detected: int
    sampled_corrections: int
    oracle_added: int
    warning: str = ""

    @property
    def train_samples(self) -> list:
        return list(self.correction_samples) + list(self.oracle_samples)


def _segment_distance(p: Point2, a: Point2, b: Point2) -> float:
    """Exact point-to-segment distance."""
    ax, ay = a.x, a.y
    vx, vy = b.x - ax, b.y - ay
    denom = vx * vx + vy * vy
    if denom == 0:
        return p.distance_to(a)
    t = max(0.0, min(1.0, ((p.x - ax) * vx + (p.y - ay) * vy) / denom))
    return math.hypot(p.x - (ax + t * vx), p.y - (ay + t * vy))


def _nearest_landmark(world: WorldSpec, p: Point2):
    return min(world.landmarks, key=lambda lm: lm.position.distance_to(p))


def trajectory_to_instruction(reference_points, world: WorldSpec) -> str:
    """Deterministic clause template over turns and passed landmarks,
    ending at the landmark nearest the final reference point."""
    pts = [Point2(float(x), float(y)) for x, y in np.asarray(reference_points, dtype=float)]
    goal_lm = _nearest_landmark(world, pts[-1])
    clauses = ["go forward"]
    passed = []
    headings = [
        math.atan2(b.y - a.y, b.x - a.x) for a, b in zip(pts, pts[1:])
    ]
    for i, (a, b) in enumerate(zip(pts, pts[1:])):
        if i > 0:
            delta = (headings[i] - headings[i - 1] + math.pi) % (2 * math.pi) - math.pi
            if delta > TURN_CLAUSE_THRESHOLD:
                clauses.append("turn left")
            elif delta < -TURN_CLAUSE_THRESHOLD:
                clauses.append("turn right")
        for lm in world.landmarks:
            if lm.id == goal_lm.id or lm.id in passed:
                continue
            if _segment_distance(lm.position, a, b) < PASS_RADIUS:
                passed.append(lm.id)
                clauses.append(f"pass the {lm.color} {lm.name}")
    clauses.append(f"stop at the {goal_lm.color} {goal_lm.name}")
    return ", ".join(clauses)


def generate_episodes(
    world: WorldSpec,
    count: int,
    seed: int,
    min_path_length: float = 0.0,
    world_key: str = "world",
    turn_step: float = math.radians(15.0),
    max_retries_per_episode: int = 50,
    ref_spacing: float = 0.5,
) -> list:
    """Random start/goal-landmark pairs with planned oracle paths.

    Reference points are the planned path resampled at ``ref_spacing`` so
    the oracle has step-level density like the executed trajectories it is
    compared against."""
    if len(world.landmarks) < 2:
        raise DataGenError("world needs at least two landmarks")
    rng = np.random.default_rng(seed)
    free_cells = np.argwhere(~world.grid)
    episodes = []
    for i in range(count):
        for _ in range(max_retries_per_episode):
            goal_lm = world.landmarks[int(rng.integers(len(world.landmarks)))]
            row, col = free_cells[int(rng.integers(len(free_cells)))]
            start = world.cell_center(int(row), int(col))
            heading = float(rng.integers(int(round(2 * math.pi / turn_step)))) * turn_step
            if start.distance_to(goal_lm.position) < 1e-9:
                continue
            try:
                path = plan(start, goal_lm.position, world)
            except NoPathError:
                continue
            if path.length < min_path_length:
                continue
            waypoints = np.array([[p.x, p.y] for p in path.waypoints])
            if len(waypoints) > 1:
                samples = interpolate(Trajectory(waypoints, kind="oracle"), ref_spacing).samples
                # drop samples flooring into a blocked cell (boundary artifacts)
                refs = np.array([p for p in samples if world.is_free(Point2(p[0], p[1]))])
            else:
                refs = waypoints
            episodes.append(
                EpisodeSpec(
                    id=f"ep-{seed}-{i}",
                    world_key=world_key,
                    start_pose=Pose(start, heading),
                    reference_points=refs,
                    instruction=trajectory_to_instruction(refs, world),
                    goal=goal_lm.position,
                    shortest_path_length=path.length,
                )
            )
            break
        else:
            raise DataGenError(
                f"could not generate episode {i} after {max_retries_per_episode} retries"
            )
    return episodes


def oracle_actions(episode: EpisodeSpec, world: WorldSpec | None = None) -> list:
    """Deterministic compiled action sequence for the oracle path."""
    path = PlannedPath(
        waypoints=tuple(Point2(float(x), float(y)) for x, y in episode.reference_points),
        length=episode.shortest_path_length,
    )
    return path_to_actions(path, episode.start_pose, world=world)


def _chunk_at(actions: list, t: int, chunk_size: int) -> list:
    chunk = []
    for a in actions[t : t + chunk_size]:
        chunk.append(a)
        if a.kind == "STOP":
            break
    return chunk


def oracle_to_samples(
    episode: EpisodeSpec,
    world: WorldSpec,
    randcfg: RandomizationConfig,
    chunk_size: int = CHUNK_SIZE,
) -> EpisodeSamples:
    """Replay the oracle action sequence and emit one fully supervised
    chunk sample per step, plus the instruction-generation sample."""
    actions = oracle_actions(episode, world)
    rng = episode_rng(randcfg.seed, episode.id + "/oracle")
    _, observations = replay_actions(episode.start_pose, actions, world, randcfg, rng)
    samples = []
    for t in range(len(actions)):
        chunk = _chunk_at(actions, t, chunk_size)
        samples.append(
            TrainSample(
                instruction=episode.instruction,
                observations=tuple(observations[max(0, t - 15) : t + 1]),
                prev_actions=tuple(actions[max(0, t - 4) : t]),
                target=tuple(chunk),
                supervise=(True,) * len(chunk),
            )
        )
    instr = InstructionSample(
        observations=tuple(observations[-16:]),
        target_tokens=tuple(tokenize(episode.instruction)),
    )
    return EpisodeSamples(episode_id=episode.id, train_samples=tuple(samples), instruction_sample=instr)


def make_correction(
    episode: EpisodeSpec,
    rollout_result: RolloutResult,
    report: DeviationReport,
    world: WorldSpec,
    randcfg: RandomizationConfig | None = None,
    iteration: int = 0,
    keyframe_offset: int = KEYFRAME_OFFSET,
) -> CorrectionRecord | None:
    """Plan the recovery path from the deviation point through the remaining
    reference points; None (with a logged reason) when the agent is trapped."""
    t = report.deviation_index
    executed = rollout_result.trajectory
    deviation_pose = rollout_result.poses[t - 1]
    m_t = deviation_pose.position
    refs = episode.reference_points
    k = report.segment_index
    through = [m_t] + [Point2(float(x), float(y)) for x, y in refs[k:]]
    try:
        path = plan_through(through, world)
    except NoPathError as exc:
        log.warning("correction skipped for %s: %s", episode.id, exc)
        return None
    actions = path_to_actions(path, deviation_pose, world=world)
    if randcfg is None:
        randcfg = RandomizationConfig()
    rng = episode_rng(randcfg.seed, episode.id + f"/corr{iteration}")
    _, corr_obs = replay_actions(deviation_pose, actions, world, randcfg, rng)
    m = len(executed)
    keyframes = sorted({max(1, t - keyframe_offset), t, min(m, t + keyframe_offset)})
    truth_cfg = replace(randcfg, bearing_jitter=0.0, landmark_dropout=0.0, distance_bin_noise=0.0)
    truth_rng = np.random.default_rng(0)
    return CorrectionRecord(
        episode_id=episode.id,
        instruction=episode.instruction,
        iteration=iteration,
        report=report,
        deviation_pose=deviation_pose,
        correction_path=path,
        correction_actions=actions,
        correction_observations=corr_obs,
        history_observations=list(rollout_result.observations[:t]),
        history_actions=list(rollout_result.actions[: t - 1]),
        keyframe_indices=keyframes,
        keyframe_windows=[
            list(rollout_result.observations[max(0, i - 16) : i]) for i in keyframes
        ],
        keyframe_truth=[
            observe(rollout_result.poses[i - 1], world, truth_cfg, truth_rng, timestep=i - 1)
            for i in keyframes
        ],
    )


def correction_to_samples(record: CorrectionRecord, chunk_size: int = CHUNK_SIZE) -> list:
    """Chunk samples over history + correction; only slots on or after the
    first correction action are supervised."""
    actions = list(record.history_actions) + list(record.correction_actions)
    observations = list(record.history_observations) + list(record.correction_observations[1:])
    first_correction = len(record.history_actions)
    samples = []
    for t in range(len(actions)):
        chunk = _chunk_at(actions, t, chunk_size)
        samples.append(
            TrainSample(
                instruction=record.instruction,
                observations=tuple(observations[max(0, t - 15) : t + 1]),
                prev_actions=tuple(actions[max(0, t - 4) : t]),
                target=tuple(chunk),
                supervise=tuple(t + j >= first_correction for j in range(len(chunk))),
            )
        )
    return samples


# --- annotator ----------------------------------------------------------


class AnnotatorError(RuntimeError):
    """Annotator backend failure."""


class StubAnnotator:
    """Deterministic ground-truth annotator reading straight off the
    symbolic observation."""

    def annotate(self, observation: Observation, prompt_kind: str) -> dict:
        visible = list(observation.visible)
        if prompt_kind == "caption":
            if not visible:
                return {"caption": "none"}
            return {"caption": " ".join(f"{v.color} {v.name}" for v in visible)}
        if prompt_kind == "qa":
            if not visible:
                return {"qa_list": []}
            target = visible[0]
            return {
                "qa_list": [
                    {
                        "question": f"where is the {target.color} {target.name}",
                        "category": "relative_position",
                        "answer": target.bearing_bin,
                    },
                    {
                        "question": f"what color is the {target.name}",
                        "category": "color",
                        "answer": target.color,
                    },
                    {
                        "question": f"how far is the {target.color} {target.name}",
                        "category": "distance",
                        "answer": target.distance_bin,
                    },
                ]
            }
        raise AnnotatorError(f"unknown prompt kind {prompt_kind!r}")


class HttpAnnotator:
    """Remote annotator endpoint speaking the same contract over HTTP POST."""

    def __init__(self, url: str, token: str = "", timeout: float = 10.0, retries: int = 2):
        self.url = url
        self.token = token
        self.timeout = timeout
        self.retries = retries

    def annotate(self, observation: Observation, prompt_kind: str) -> dict:
        import requests

        payload = {"observation": observation_to_json(observation), "prompt_kind": prompt_kind}
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        last = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()
            except Exception as exc:
                last = exc
        raise AnnotatorError(f"annotator unreachable at {self.url}: {last}")


def make_perception(record: CorrectionRecord, annotator) -> list:
    """Caption + closed-set QA samples for every correction keyframe; a
    failing keyframe is skipped with a logged reason, never raised."""
    samples = []
    for window, truth in zip(record.keyframe_windows, record.keyframe_truth):
        try:
            cap = annotator.annotate(truth, "caption")
            qa = annotator.annotate(truth, "qa")
        except AnnotatorError as exc:
            log.warning("keyframe skipped for %s: %s", record.episode_id, exc)
            continue
        samples.append(
            PerceptionSample(
                observations=tuple(window),
                task="caption",
                caption_tokens=tuple(tokenize(cap["caption"])),
            )
        )
        for pair in qa["qa_list"]:
            samples.append(
                PerceptionSample(
                    observations=tuple(window),
                    task="qa",
                    question=pair["question"],
                    category=pair["category"],
                    answer=pair["answer"],
                )
            )
    return samples


def sample_mix(
    corrections: list,
    oracle_pool: list,
    seed: int,
) -> MixedDataset:
    """Half the corrections (uniformly, with their perception samples),
    plus half that many oracle episodes from the original pool."""
    rng = np.random.default_rng(seed)
    detected = len(corrections)
    n_sampled = detected // 2
    warning = ""
    chosen: list[CorrectionBundle] = []
    if n_sampled > 0:
        idx = rng.choice(detected, size=n_sampled, replace=False)
        chosen = [corrections[i] for i in sorted(idx)]
    else:
        warning = "no corrections sampled; mix contains oracle data only"
        log.warning(warning)
    n_oracle = n_sampled // 2
    oracle_chosen: list[EpisodeSamples] = []
    if n_oracle > 0 and oracle_pool:
        if n_oracle > len(oracle_pool):
            log.warning(
                "oracle pool smaller than requested (%d < %d); taking all",
                len(oracle_pool),
                n_oracle,
            )
            oracle_chosen = list(oracle_pool)
        else:
            idx = rng.choice(len(oracle_pool), size=n_oracle, replace=False)
            oracle_chosen = [oracle_pool[i] for i in sorted(idx)]
    correction_samples = []
    oracle_samples = []
    perception_samples = []
    instruction_samples = []
    for bundle in chosen:
        correction_samples.extend(bundle.train_samples)
        perception_samples.extend(bundle.perception_samples)
    for ep in oracle_chosen:
        oracle_samples.extend(ep.train_samples)
        if ep.instruction_sample is not None:
            instruction_samples.append(ep.instruction_sample)
    return MixedDataset(
        correction_samples=correction_samples,
        oracle_samples=oracle_samples,
        perception_samples=perception_samples,
        instruction_samples=instruction_samples,
        detected=detected,
        sampled_corrections=n_sampled,
        oracle_added=len(oracle_chosen),
        warning=warning,
    )


# --- serialization ------------------------------------------------------


def action_to_json(a: Action) -> dict:
    return {"kind": a.kind, "magnitude": a.magnitude}


def action_from_json(d: dict) -> Action:
    return Action(d["kind"], d["magnitude"])


def observation_to_json(o: Observation) -> dict:
    return {
        "timestamp": o.timestamp,
        "visible": [
            [v.landmark_id, v.name, v.color, v.bearing_bin, v.distance_bin] for v in o.visible
        ],
        "blocked": [int(b) for b in o.blocked],
    }


def observation_from_json(d: dict) -> Observation:
    return Observation(
        visible=tuple(VisibleLandmark(*entry) for entry in d["visible"]),
        timestamp=d["timestamp"],
        blocked=tuple(bool(b) for b in d.get("blocked", (0,) * 8)),
    )


def train_sample_to_json(s: TrainSample, kind: str) -> dict:
    return {
        "kind": kind,
        "instruction": s.instruction,
        "observations": [observation_to_json(o) for o in s.observations],
        "prev_actions": [action_to_json(a) for a in s.prev_actions],
        "target": [action_to_json(a) for a in s.target],
        "supervise": list(s.supervise),
    }


def perception_sample_to_json(s: PerceptionSample) -> dict:
    return {
        "kind": "perception_sample",
        "observations": [observation_to_json(o) for o in s.observations],
        "task": s.task,
        "caption_tokens": list(s.caption_tokens),
        "question": s.question,
        "category": s.category,
        "answer": s.answer,
    }


def sample_from_json(d: dict):
    if d["kind"] == "perception_sample":
        return PerceptionSample(
            observations=tuple(observation_from_json(o) for o in d["observations"]),
            task=d["task"],
            caption_tokens=tuple(d["caption_tokens"]),
            question=d["question"],
            category=d["category"],
            answer=d["answer"],
        )
    return TrainSample(
        instruction=d["instruction"],
        observations=tuple(observation_from_json(o) for o in d["observations"]),
        prev_actions=tuple(action_from_json(a) for a in d["prev_actions"]),
        target=tuple(action_from_json(a) for a in d["target"]),
        supervise=tuple(d["supervise"]),
    )


def write_dataset(path, oracle_samples=(), correction_samples=(), perception_samples=()) -> dict:
    """JSONL dataset with per-record kind tags; returns the count summary."""
    counts = {"oracle_sample": 0, "correction_sample": 0, "perception_sample": 0}
    with open(path, "w") as fh:
        for s in oracle_samples:
            fh.write(json.dumps(train_sample_to_json(s, "oracle_sample")) + "\n")
            counts["oracle_sample"] += 1
        for s in correction_samples:
            fh.write(json.dumps(train_sample_to_json(s, "correction_sample")) + "\n")
            counts["correction_sample"] += 1
        for s in perception_samples:
            fh.write(json.dumps(perception_sample_to_json(s)) + "\n")
            counts["perception_sample"] += 1
    return counts


def read_dataset(path):
    """Returns (oracle_samples, correction_samples, perception_samples)."""
    oracle, corrections, perception = [], [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            obj = sample_from_json(d)
            if d["kind"] == "oracle_sample":
                oracle.append(obj)
            elif d["kind"] == "correction_sample":
                corrections.append(obj)
            else:
                perception.append(obj)
    return oracle, corrections, perception


def write_manifest(path, counts: dict, seeds: dict, iteration: int) -> None:
    with open(path, "w") as fh:
        json.dump({"counts": counts, "seeds": seeds, "iteration": iteration}, fh, indent=2)
        fh.write("\n")


def episode_to_json(e: EpisodeSpec) -> dict:
    return {
        "id": e.id,
        "world_key": e.world_key,
        "start": [e.start_pose.position.x, e.start_pose.position.y, e.start_pose.heading],
        "reference_points": e.reference_points.tolist(),
        "instruction": e.instruction,
        "goal": [e.goal.x, e.goal.y],
        "shortest_path_length": e.shortest_path_length,
    }


def episode_from_json(d: dict) -> EpisodeSpec:
    x, y, heading = d["start"]
    return EpisodeSpec(
        id=d["id"],
        world_key=d["world_key"],
        start_pose=Pose(Point2(x, y), heading),
        reference_points=np.asarray(d["reference_points"], dtype=float),
        instruction=d["instruction"],
        goal=Point2(*d["goal"]),
        shortest_path_length=d["shortest_path_length"],
    )


def write_episodes(path, episodes: list) -> None:
    with open(path, "w") as fh:
        for e in episodes:
            fh.write(json.dumps(episode_to_json(e)) + "\n")


def read_episodes(path) -> list:
    episodes = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                episodes.append(episode_from_json(json.loads(line)))
    return episodes
