"""Trainable navigation model: a deterministic symbolic featurizer shared by
three linear heads (chunked action prediction, keyframe perception, and
instruction generation), trained by per-sample SGD."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .world import (
    Action,
    BEARING_BINS,
    DEFAULT_FORWARD_STEP,
    DEFAULT_TURN_STEP,
    DISTANCE_BINS,
    LANDMARK_COLORS,
    LANDMARK_NAMES,
    forward,
    stop,
    turn_left,
    turn_right,
)

MOTION_WORDS = ["go", "forward", "turn", "left", "right", "pass", "stop", "at", "the", "and", "none"]
VOCAB = LANDMARK_NAMES + LANDMARK_COLORS + MOTION_WORDS
OOV_INDEX = len(VOCAB)
VOCAB_SIZE = len(VOCAB) + 1  # trailing OOV slot

WINDOW_FRAMES = 16
CHUNK_SIZE = 4
RECENT_ACTIONS = 4

ACTION_ORDER = ["FORWARD", "TURN_LEFT", "TURN_RIGHT", "STOP"]

# per frame, per bearing bin: name occupancy + color occupancy + distance
# bins + goal-landmark match flag + goal-match-by-distance flags; plus the
# 8 obstacle-probe bits per frame
_BIN_WIDTH = len(LANDMARK_NAMES) + len(LANDMARK_COLORS) + 2 * len(DISTANCE_BINS) + 1
_FRAME_WIDTH = len(BEARING_BINS) * _BIN_WIDTH + len(BEARING_BINS)
FEATURE_DIM = VOCAB_SIZE + WINDOW_FRAMES * _FRAME_WIDTH + RECENT_ACTIONS * len(ACTION_ORDER) + 1

QA_CATEGORIES = {
    "relative_position": BEARING_BINS,
    "color": LANDMARK_COLORS,
    "distance": DISTANCE_BINS,
}

DEFAULT_LEARNING_RATE = 0.1
DEFAULT_EPOCHS = 5


class PolicyError(ValueError):
    """Invalid policy input."""


class CheckpointError(RuntimeError):
    """Unreadable or corrupt checkpoint file."""


def tokenize(text: str) -> list:
    return [t for t in text.lower().replace(",", " ").replace(".", " ").split() if t]


def token_index(token: str) -> int:
    try:
        return VOCAB.index(token)
    except ValueError:
        return OOV_INDEX


def vocab_hash() -> bytes:
    return hashlib.sha256(json.dumps(VOCAB).encode()).digest()


def _goal_name_color(tokens: list):
    """Goal landmark named by the instruction tail (after the last 'at');
    falls back to the last name/color mentioned anywhere."""
    tail = tokens
    if "at" in tokens:
        tail = tokens[len(tokens) - 1 - tokens[::-1].index("at"):]
    name = color = None
    for t in tail if tail else tokens:
        if t in LANDMARK_NAMES:
            name = t
        if t in LANDMARK_COLORS:
            color = t
    return name, color


def featurize(instruction: str, observations: list, recent_actions: list) -> np.ndarray:
    """Fixed-width feature vector: instruction multi-hot, per-frame binned
    landmark occupancy (most recent frame first), last-action one-hots, and
    a bias term. Permutation of the visible-landmark list does not change
    the result."""
    f = np.zeros(FEATURE_DIM)
    tokens = tokenize(instruction)
    for t in tokens:
        f[token_index(t)] = 1.0
    goal_name, goal_color = _goal_name_color(tokens)
    base = VOCAB_SIZE
    frames = list(observations)[-WINDOW_FRAMES:][::-1]  # most recent first
    for fi, obs in enumerate(frames):
        frame_base = base + fi * _FRAME_WIDTH
        for vis in obs.visible:
            bin_base = frame_base + BEARING_BINS.index(vis.bearing_bin) * _BIN_WIDTH
            dist_idx = DISTANCE_BINS.index(vis.distance_bin)
            f[bin_base + LANDMARK_NAMES.index(vis.name)] = 1.0
            f[bin_base + len(LANDMARK_NAMES) + LANDMARK_COLORS.index(vis.color)] = 1.0
            f[bin_base + len(LANDMARK_NAMES) + len(LANDMARK_COLORS) + dist_idx] = 1.0
            if vis.name == goal_name and vis.color == goal_color:
                goal_base = bin_base + len(LANDMARK_NAMES) + len(LANDMARK_COLORS) + len(DISTANCE_BINS)
                f[goal_base] = 1.0
                f[goal_base + 1 + dist_idx] = 1.0
        probe_base = frame_base + len(BEARING_BINS) * _BIN_WIDTH
        for bi, hit in enumerate(obs.blocked):
            if hit:
                f[probe_base + bi] = 1.0
    base += WINDOW_FRAMES * _FRAME_WIDTH
    recent = list(recent_actions)[-RECENT_ACTIONS:][::-1]
    for ai, action in enumerate(recent):
        f[base + ai * len(ACTION_ORDER) + ACTION_ORDER.index(action.kind)] = 1.0
    f[-1] = 1.0  # bias
    return f


def action_from_class(idx: int, forward_step: float = DEFAULT_FORWARD_STEP, turn_step: float = DEFAULT_TURN_STEP) -> Action:
    kind = ACTION_ORDER[idx]
    if kind == "FORWARD":
        return forward(forward_step)
    if kind == "TURN_LEFT":
        return turn_left(turn_step)
    if kind == "TURN_RIGHT":
        return turn_right(turn_step)
    return stop()


def action_class(action: Action) -> int:
    return ACTION_ORDER.index(action.kind)


@dataclass(frozen=True)
class TrainSample:
    """One chunk-prediction sample: instruction + observation window +
    up-to-4 target actions with a per-slot supervision mask.

    ``prev_actions`` are the actions executed immediately before the chunk
    (teacher forcing context for slot 0)."""

    instruction: str
    observations: tuple
    prev_actions: tuple
    target: tuple
    supervise: tuple

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        object.__setattr__(self, "prev_actions", tuple(self.prev_actions))
        object.__setattr__(self, "target", tuple(self.target))
        object.__setattr__(self, "supervise", tuple(self.supervise))
        if len(self.target) != len(self.supervise):
            raise PolicyError("target chunk and supervision mask lengths differ")
        if not 1 <= len(self.target) <= CHUNK_SIZE:
            raise PolicyError(f"chunk must hold 1..{CHUNK_SIZE} actions")
        for a in self.target[:-1]:
            if a.kind == "STOP":
                raise PolicyError("STOP may only occupy the final chunk slot")


@dataclass(frozen=True)
class PerceptionSample:
    """Keyframe perception target: either a caption token set or one closed-
    set QA pair."""

    observations: tuple
    task: str  # "caption" | "qa"
    caption_tokens: tuple = ()
    question: str = ""
    category: str = ""
    answer: str = ""

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        object.__setattr__(self, "caption_tokens", tuple(self.caption_tokens))
        if self.task not in ("caption", "qa"):
            raise PolicyError(f"unknown perception task {self.task!r}")
        if self.task == "qa":
            if self.category not in QA_CATEGORIES:
                raise PolicyError(f"unknown QA category {self.category!r}")
            if self.answer not in QA_CATEGORIES[self.category]:
                raise PolicyError(
                    f"answer {self.answer!r} outside closed set for {self.category}"
                )


@dataclass(frozen=True)
class InstructionSample:
    """Full-episode observation history with the templated instruction's
    token set as target (instruction-generation head)."""

    observations: tuple
    target_tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        object.__setattr__(self, "target_tokens", tuple(self.target_tokens))


@dataclass
class PolicyModel:
    """Linear softmax heads over the shared feature encoding."""

    w_action: np.ndarray
    w_perception: dict
    w_caption: np.ndarray
    w_instruction: np.ndarray
    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs: int = DEFAULT_EPOCHS
    version: int = 0
    forward_step: float = DEFAULT_FORWARD_STEP
    turn_step: float = DEFAULT_TURN_STEP

    @classmethod
    def initial(cls, **kwargs) -> "PolicyModel":
        return cls(
            w_action=np.zeros((len(ACTION_ORDER), FEATURE_DIM)),
            w_perception={
                cat: np.zeros((len(answers), FEATURE_DIM))
                for cat, answers in QA_CATEGORIES.items()
            },
            w_caption=np.zeros((VOCAB_SIZE, FEATURE_DIM)),
            w_instruction=np.zeros((VOCAB_SIZE, FEATURE_DIM)),
            **kwargs,
        )

    def copy(self) -> "PolicyModel":
        return replace(
            self,
            w_action=self.w_action.copy(),
            w_perception={k: v.copy() for k, v in self.w_perception.items()},
            w_caption=self.w_caption.copy(),
            w_instruction=self.w_instruction.copy(),
        )

    # --- prediction -----------------------------------------------------

    def predict(self, instruction: str, observations: list, recent_actions: list) -> list:
        """Greedy chunk decoding; each slot is conditioned on the slots
        already decoded through the recent-action feature block. Ties break
        by fixed action order (FORWARD first)."""
        decoded: list[Action] = []
        history = list(recent_actions)
        for _ in range(CHUNK_SIZE):
            f = featurize(instruction, observations, history + decoded)
            logits = self.w_action @ f
            idx = int(np.argmax(logits))  # first max wins the tie
            action = action_from_class(idx, self.forward_step, self.turn_step)
            decoded.append(action)
            if action.kind == "STOP":
                break
        return decoded

    def answer(self, observations: list, category: str) -> str:
        """Closed-set QA readout for one category."""
        f = featurize("", observations, [])
        logits = self.w_perception[category] @ f
        return QA_CATEGORIES[category][int(np.argmax(logits))]

    def generate_instruction(self, observations: list) -> set:
        """Predicted instruction token set from an episode's observation
        history (tokens whose sigmoid activation exceeds 0.5)."""
        f = featurize("", observations, [])
        z = self.w_instruction @ f
        return {VOCAB[i] for i in range(len(VOCAB)) if z[i] > 0.0}


def predict_chunk(model: PolicyModel, instruction: str, observations: list, recent_actions: list) -> list:
    return model.predict(instruction, observations, recent_actions)


# --- gradients ----------------------------------------------------------


def softmax_ce_grad(w: np.ndarray, f: np.ndarray, target_idx: int):
    """(loss, dL/dW) for one softmax cross-entropy sample."""
    z = w @ f
    z = z - np.max(z)
    p = np.exp(z)
    p /= p.sum()
    loss = -float(np.log(max(p[target_idx], 1e-300)))
    delta = p.copy()
    delta[target_idx] -= 1.0
    return loss, np.outer(delta, f)


def sigmoid_ce_grad(w: np.ndarray, f: np.ndarray, targets: np.ndarray):
    """(loss, dL/dW) for one multi-label sigmoid cross-entropy sample."""
    z = w @ f
    p = 1.0 / (1.0 + np.exp(-z))
    eps = 1e-300
    loss = -float(np.sum(targets * np.log(np.maximum(p, eps)) + (1 - targets) * np.log(np.maximum(1 - p, eps))))
    return loss, np.outer(p - targets, f)


def _caption_target(tokens) -> np.ndarray:
    y = np.zeros(VOCAB_SIZE)
    for t in tokens:
        y[token_index(t)] = 1.0
    return y


def build_training_items(samples: list, perception: list, instruction_samples: list | None = None) -> list:
    """Flatten datasets into (head, feature, target) SGD items; masked
    chunk slots contribute nothing."""
    items = []
    for s in samples:
        for j, (action, supervised) in enumerate(zip(s.target, s.supervise)):
            if not supervised:
                continue
            f = featurize(s.instruction, s.observations, list(s.prev_actions) + list(s.target[:j]))
            items.append(("action", None, f, action_class(action)))
    for p in perception:
        f = featurize("", p.observations, [])
        if p.task == "caption":
            items.append(("caption", None, f, _caption_target(p.caption_tokens)))
        else:
            items.append(
                ("qa", p.category, f, QA_CATEGORIES[p.category].index(p.answer))
            )
    for s in instruction_samples or []:
        f = featurize("", s.observations, [])
        items.append(("instruction", None, f, _caption_target(s.target_tokens)))
    return items


def train(
    model: PolicyModel,
    samples: list,
    perception: list = (),
    epochs: int | None = None,
    learning_rate: float | None = None,
    seed: int = 0,
    instruction_samples: list | None = None,
    average_tail: bool = True,
) -> PolicyModel:
    """Per-sample SGD over all heads; continued training starts from the
    incoming weights and bumps the version counter.

    With ``average_tail`` the returned action weights are the running
    average over the final epoch (tail averaging), which removes most of
    the last-seen-sample noise of plain SGD."""
    if not samples and not perception and not instruction_samples:
        raise PolicyError("training requires a non-empty dataset")
    epochs = model.epochs if epochs is None else epochs
    learning_rate = model.learning_rate if learning_rate is None else learning_rate
    out = model.copy()
    items = build_training_items(list(samples), list(perception), instruction_samples)
    rng = np.random.default_rng(seed)
    avg_action = None
    avg_count = 0
    for epoch in range(epochs):
        final_epoch = epoch == epochs - 1
        for idx in rng.permutation(len(items)):
            head, category, f, target = items[idx]
            if head == "action":
                _, grad = softmax_ce_grad(out.w_action, f, target)
                out.w_action -= learning_rate * grad
                if average_tail and final_epoch:
                    if avg_action is None:
                        avg_action = out.w_action.copy()
                    else:
                        avg_action += out.w_action
                    avg_count += 1
            elif head == "qa":
                _, grad = softmax_ce_grad(out.w_perception[category], f, target)
                out.w_perception[category] -= learning_rate * grad
            elif head == "caption":
                _, grad = sigmoid_ce_grad(out.w_caption, f, target)
                out.w_caption -= learning_rate * grad
            else:
                _, grad = sigmoid_ce_grad(out.w_instruction, f, target)
                out.w_instruction -= learning_rate * grad
    if average_tail and avg_count > 0:
        out.w_action = avg_action / avg_count
    out.version = model.version + 1
    return out


# --- checkpoint format --------------------------------------------------

_MAGIC = b"NVFW0001"


def _pack_matrix(name: str, mat: np.ndarray) -> bytes:
    data = np.ascontiguousarray(mat, dtype="<f8").tobytes()
    header = struct.pack("<B", len(name)) + name.encode()
    header += struct.pack("<II", *mat.shape)
    return header + data


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def save(model: PolicyModel, path) -> None:
    """Binary checkpoint: magic, version counter, vocabulary hash, named
    float64 little-endian matrices, sha256 trailer."""
    matrices = [("action", model.w_action)]
    matrices += [(f"qa:{cat}", model.w_perception[cat]) for cat in sorted(model.w_perception)]
    matrices += [("caption", model.w_caption), ("instruction", model.w_instruction)]
    body = _MAGIC
    body += struct.pack("<q", model.version)
    body += struct.pack("<dd", model.learning_rate, model.forward_step)
    body += struct.pack("<dq", model.turn_step, model.epochs)
    body += vocab_hash()
    body += struct.pack("<I", len(matrices))
    for name, mat in matrices:
        body += _pack_matrix(name, mat)
    body += hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body)


def load(path) -> PolicyModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 32 or blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    r = _Reader(body)
    r.take(len(_MAGIC))
    version = struct.unpack("<q", r.take(8))[0]
    learning_rate, forward_step = struct.unpack("<dd", r.take(16))
    turn_step, epochs = struct.unpack("<dq", r.take(16))
    if r.take(32) != vocab_hash():
        raise CheckpointError(f"{path}: vocabulary mismatch")
    count = struct.unpack("<I", r.take(4))[0]
    mats = {}
    for _ in range(count):
        name_len = struct.unpack("<B", r.take(1))[0]
        name = r.take(name_len).decode()
        rows, cols = struct.unpack("<II", r.take(8))
        mats[name] = np.frombuffer(r.take(rows * cols * 8), dtype="<f8").reshape(rows, cols).copy()
    try:
        return PolicyModel(
            w_action=mats["action"],
            w_perception={cat: mats[f"qa:{cat}"] for cat in QA_CATEGORIES},
            w_caption=mats["caption"],
            w_instruction=mats["instruction"],
            learning_rate=learning_rate,
            epochs=int(epochs),
            version=int(version),
            forward_step=forward_step,
            turn_step=turn_step,
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing matrix {exc}") from exc


@dataclass
class ScriptedPolicy:
    """Replays a fixed action list chunk by chunk (test/scripted oracle)."""

    actions: list
    cursor: int = 0

    def predict(self, instruction, observations, recent_actions):
        chunk = list(self.actions[self.cursor : self.cursor + CHUNK_SIZE])
        self.cursor += len(chunk)
        if not chunk:
            return [stop()]
        return chunk

    def reset(self):
        self.cursor = 0


@dataclass
class StopPolicy:
    """Emits STOP immediately."""

    def predict(self, instruction, observations, recent_actions):
        return [stop()]
