"""Policy tests: featurization properties, gradient correctness against
finite differences, supervision masking, training behavior, greedy chunk
decoding, and the binary checkpoint format."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from navflywheel.policy import (
    ACTION_ORDER,
    CHUNK_SIZE,
    FEATURE_DIM,
    QA_CATEGORIES,
    VOCAB,
    VOCAB_SIZE,
    CheckpointError,
    InstructionSample,
    PerceptionSample,
    PolicyError,
    PolicyModel,
    ScriptedPolicy,
    TrainSample,
    action_class,
    action_from_class,
    build_training_items,
    featurize,
    load,
    save,
    sigmoid_ce_grad,
    softmax_ce_grad,
    token_index,
    tokenize,
    train,
)
from navflywheel.world import Observation, VisibleLandmark, forward, stop, turn_left, turn_right


def vis(name="door", color="red", bearing="ahead", dist="near", lid=0):
    return VisibleLandmark(lid, name, color, bearing, dist)


def obs(*visible, blocked=(False,) * 8, timestamp=0):
    return Observation(visible=tuple(visible), timestamp=timestamp, blocked=blocked)


def sample(target, supervise, instruction="stop at the red door", observations=None):
    return TrainSample(
        instruction=instruction,
        observations=observations or (obs(vis()),),
        prev_actions=(),
        target=tuple(target),
        supervise=tuple(supervise),
    )


class TestTokenizer:
    def test_tokenize_strips_punctuation(self):
        assert tokenize("Go forward, stop at the Red door.") == [
            "go", "forward", "stop", "at", "the", "red", "door",
        ]

    def test_oov_index(self):
        assert token_index("door") == VOCAB.index("door")
        assert token_index("zebra") == len(VOCAB)


class TestFeaturize:
    def test_shape_and_bias(self):
        f = featurize("go forward", [obs(vis())], [])
        assert f.shape == (FEATURE_DIM,)
        assert f[-1] == 1.0

    def test_permutation_invariance(self):
        a = vis("door", "red", "ahead", "near", 0)
        b = vis("chair", "blue", "left", "far", 1)
        f1 = featurize("go", [obs(a, b)], [forward()])
        f2 = featurize("go", [obs(b, a)], [forward()])
        assert np.array_equal(f1, f2)

    def test_most_recent_frame_first(self):
        early, late = obs(vis("door")), obs(vis("chair"))
        f = featurize("", [early, late], [])
        g = featurize("", [late], [])
        # the most recent frame occupies the same feature block either way
        frame0 = slice(VOCAB_SIZE, VOCAB_SIZE + (FEATURE_DIM - VOCAB_SIZE - 17) // 16)
        assert np.array_equal(
            f[VOCAB_SIZE : VOCAB_SIZE + 50], g[VOCAB_SIZE : VOCAB_SIZE + 50]
        )

    def test_goal_match_channel_requires_name_and_color(self):
        match = featurize("stop at the red door", [obs(vis("door", "red"))], [])
        wrong_color = featurize("stop at the red door", [obs(vis("door", "blue"))], [])
        assert not np.array_equal(match, wrong_color)
        assert match.sum() > wrong_color.sum()

    def test_window_truncates_to_16_frames(self):
        frames = [obs(vis(), timestamp=i) for i in range(30)]
        assert np.array_equal(featurize("", frames, []), featurize("", frames[-16:], []))

    def test_blocked_probes_set_features(self):
        f_clear = featurize("", [obs()], [])
        f_blocked = featurize("", [obs(blocked=(True,) * 8)], [])
        assert f_blocked.sum() == f_clear.sum() + 8


class TestSampleValidation:
    def test_mask_length_must_match(self):
        with pytest.raises(PolicyError):
            sample([forward(), stop()], [True])

    def test_stop_only_in_final_slot(self):
        with pytest.raises(PolicyError):
            sample([stop(), forward()], [True, True])
        sample([forward(), stop()], [True, True])

    def test_chunk_size_bounds(self):
        with pytest.raises(PolicyError):
            sample([forward()] * 5, [True] * 5)
        with pytest.raises(PolicyError):
            sample([], [])

    def test_qa_answer_must_be_in_closed_set(self):
        with pytest.raises(PolicyError):
            PerceptionSample(observations=(obs(),), task="qa", category="color", answer="teal")
        with pytest.raises(PolicyError):
            PerceptionSample(observations=(obs(),), task="qa", category="mood", answer="red")
        with pytest.raises(PolicyError):
            PerceptionSample(observations=(obs(),), task="sketch")


class TestGradients:
    def finite_diff(self, loss_fn, w, eps=1e-6):
        num = np.zeros_like(w)
        for i in range(w.shape[0]):
            for j in range(0, w.shape[1], max(1, w.shape[1] // 40)):
                wp = w.copy()
                wp[i, j] += eps
                wm = w.copy()
                wm[i, j] -= eps
                num[i, j] = (loss_fn(wp) - loss_fn(wm)) / (2 * eps)
        return num

    def test_softmax_grad_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        w = rng.normal(0, 0.5, (4, 30))
        f = rng.normal(0, 1, 30)
        _, grad = softmax_ce_grad(w, f, 2)
        num = self.finite_diff(lambda ww: softmax_ce_grad(ww, f, 2)[0], w)
        mask = num != 0
        assert np.allclose(grad[mask], num[mask], rtol=1e-5, atol=1e-7)

    def test_sigmoid_grad_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        w = rng.normal(0, 0.5, (6, 25))
        f = rng.normal(0, 1, 25)
        y = (rng.random(6) < 0.5).astype(float)
        _, grad = sigmoid_ce_grad(w, f, y)
        num = self.finite_diff(lambda ww: sigmoid_ce_grad(ww, f, y)[0], w)
        mask = num != 0
        assert np.allclose(grad[mask], num[mask], rtol=1e-5, atol=1e-7)

    def test_softmax_grad_stable_for_large_logits(self):
        w = np.full((3, 4), 500.0)
        f = np.ones(4)
        loss, grad = softmax_ce_grad(w, f, 0)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))


class TestMasking:
    def test_fully_masked_slots_contribute_nothing(self):
        s = sample([forward(), turn_left()], [False, False])
        assert build_training_items([s], []) == []

    def test_all_masks_false_leaves_weights_bitwise_unchanged(self):
        model = PolicyModel.initial()
        rng = np.random.default_rng(2)
        model.w_action += rng.normal(0, 0.1, model.w_action.shape)
        before = model.w_action.tobytes()
        masked = [sample([forward(), turn_right()], [False, False]) for _ in range(5)]
        qa = PerceptionSample(
            observations=(obs(vis()),), task="qa", category="color", answer="red"
        )
        trained = train(model, masked, [qa], epochs=2, seed=0)
        assert trained.w_action.tobytes() == before
        assert trained.w_perception["color"].tobytes() != model.w_perception["color"].tobytes()

    def test_partial_mask_supervises_only_marked_slots(self):
        s = sample([forward(), turn_left(), turn_right()], [False, True, False])
        items = build_training_items([s], [])
        assert len(items) == 1
        head, _, _, target = items[0]
        assert head == "action" and target == action_class(turn_left())


class TestTraining:
    def test_empty_dataset_raises(self):
        with pytest.raises(PolicyError):
            train(PolicyModel.initial(), [], [])

    def test_learns_a_separable_rule(self):
        # goal visible ahead -> FORWARD; nothing visible -> TURN_LEFT
        see = obs(vis("door", "red", "ahead", "near"))
        blank = obs()
        data = [
            sample([forward()], [True], observations=(see,)),
            sample([turn_left()], [True], observations=(blank,)),
        ] * 10
        model = train(PolicyModel.initial(), data, epochs=10, learning_rate=0.5, seed=0)
        assert model.predict("stop at the red door", [see], [])[0].kind == "FORWARD"
        assert model.predict("stop at the red door", [blank], [])[0].kind == "TURN_LEFT"

    def test_version_bumps_and_input_unchanged(self):
        model = PolicyModel.initial()
        snapshot = model.w_action.copy()
        out = train(model, [sample([forward()], [True])], epochs=1, seed=0)
        assert out.version == 1 and model.version == 0
        assert np.array_equal(model.w_action, snapshot)

    def test_deterministic_given_seed(self):
        data = [sample([forward(), stop()], [True, True])] * 3
        a = train(PolicyModel.initial(), data, epochs=3, seed=5)
        b = train(PolicyModel.initial(), data, epochs=3, seed=5)
        assert np.array_equal(a.w_action, b.w_action)

    def test_qa_and_caption_and_instruction_heads_train(self):
        window = (obs(vis("chair", "blue", "left", "mid")),)
        qa = PerceptionSample(
            observations=window, task="qa", category="relative_position", answer="left"
        )
        cap = PerceptionSample(
            observations=window, task="caption", caption_tokens=("blue", "chair")
        )
        instr = InstructionSample(observations=window, target_tokens=("go", "forward"))
        model = train(
            PolicyModel.initial(),
            [],
            [qa, cap] * 20,
            instruction_samples=[instr] * 20,
            epochs=5,
            learning_rate=0.5,
            seed=0,
        )
        assert model.answer(list(window), "relative_position") == "left"
        assert {"go", "forward"} <= model.generate_instruction(list(window))


class TestDecoding:
    def test_zero_model_ties_break_to_forward(self):
        chunk = PolicyModel.initial().predict("go", [obs()], [])
        assert [a.kind for a in chunk] == ["FORWARD"] * CHUNK_SIZE

    def test_stop_ends_chunk_early(self):
        model = PolicyModel.initial()
        model.w_action[ACTION_ORDER.index("STOP"), -1] = 1.0  # bias toward STOP
        chunk = model.predict("go", [obs()], [])
        assert [a.kind for a in chunk] == ["STOP"]

    def test_action_class_round_trip(self):
        for idx in range(len(ACTION_ORDER)):
            assert action_class(action_from_class(idx)) == idx

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=20, deadline=None)
    def test_chunk_length_bounds(self, seed):
        rng = np.random.default_rng(seed)
        model = PolicyModel.initial()
        model.w_action += rng.normal(0, 1, model.w_action.shape)
        chunk = model.predict("go forward", [obs(vis())], [forward()])
        assert 1 <= len(chunk) <= CHUNK_SIZE
        for a in chunk[:-1]:
            assert a.kind != "STOP"


class TestCheckpoint:
    def trained_model(self):
        return train(
            PolicyModel.initial(),
            [sample([forward(), stop()], [True, True])] * 4,
            epochs=2,
            seed=3,
        )

    def test_round_trip(self, tmp_path):
        model = self.trained_model()
        path = tmp_path / "model.ckpt"
        save(model, path)
        restored = load(path)
        assert np.array_equal(model.w_action, restored.w_action)
        for cat in QA_CATEGORIES:
            assert np.array_equal(model.w_perception[cat], restored.w_perception[cat])
        assert restored.version == model.version
        assert restored.learning_rate == model.learning_rate

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save(self.trained_model(), path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"hello world, definitely not a checkpoint")
        with pytest.raises(CheckpointError):
            load(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save(self.trained_model(), path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(CheckpointError):
            load(path)


class TestScriptedPolicy:
    def test_chunks_and_exhaustion(self):
        script = [forward()] * 5 + [stop()]
        p = ScriptedPolicy(list(script))
        assert len(p.predict("", [], [])) == CHUNK_SIZE
        assert len(p.predict("", [], [])) == 2
        assert [a.kind for a in p.predict("", [], [])] == ["STOP"]
        p.reset()
        assert p.predict("", [], []) == script[:CHUNK_SIZE]
