"""Orchestration of the self-correction loop: evaluate on the train split,
detect deviations, build correction + perception data, mix with oracle
episodes, continue training, and iterate with a stop-on-drop rule."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen, metrics as metrics_mod, policy as policy_mod
from .geometry import Trajectory, detect_deviation
from .world import RandomizationConfig, rollout

log = logging.getLogger(__name__)


@dataclass
class FlywheelConfig:
    iterations: int = 3
    threshold_s: float = 1.0
    spacing: float = 0.05
    seed: int = 0
    stop_on_drop: bool = True
    max_steps: int = 200
    randcfg: RandomizationConfig = field(default_factory=RandomizationConfig)
    train_epochs: int | None = None
    learning_rate: float | None = None
    keyframe_offset: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.threshold_s <= 0:
            raise ValueError("threshold must be positive")

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "threshold_s": self.threshold_s,
            "spacing": self.spacing,
            "seed": self.seed,
            "stop_on_drop": self.stop_on_drop,
            "max_steps": self.max_steps,
            "randcfg": {
                "visibility_range": self.randcfg.visibility_range,
                "bearing_jitter": self.randcfg.bearing_jitter,
                "landmark_dropout": self.randcfg.landmark_dropout,
                "distance_bin_noise": self.randcfg.distance_bin_noise,
                "seed": self.randcfg.seed,
            },
            "train_epochs": self.train_epochs,
            "learning_rate": self.learning_rate,
            "keyframe_offset": self.keyframe_offset,
        }


def evaluate_split(model, episodes, worlds, randcfg, max_steps: int = 200):
    """Roll out every episode; per-episode failures are logged in the
    result, never raised."""
    results = []
    for ep in episodes:
        result = rollout(model, ep, worlds[ep.world_key], randcfg, max_steps=max_steps)
        if result.failed:
            log.warning("episode %s failed: %s", ep.id, result.error)
        results.append(result)
    return results


def split_summary(results) -> metrics_mod.MetricSummary:
    return metrics_mod.aggregate([r.metrics for r in results])


def _iteration_seed(config: FlywheelConfig, iteration: int, salt: int) -> int:
    return int(
        np.random.SeedSequence([config.seed, iteration, salt]).generate_state(1)[0]
    )


def collect_corrections(
    results,
    episodes,
    worlds,
    config: FlywheelConfig,
    annotator,
    iteration: int,
    include_correction_samples: bool = True,
):
    """Deviation detection + correction/perception data for one split pass.

    Returns (bundles, deviation_count). ``include_correction_samples=False``
    keeps only the keyframe perception data (ablation switch)."""
    bundles = []
    deviations = 0
    for ep, result in zip(episodes, results):
        oracle = Trajectory(ep.reference_points, kind="oracle")
        report = detect_deviation(result.trajectory, oracle, config.threshold_s, config.spacing)
        if report is None:
            continue
        deviations += 1
        record = datagen.make_correction(
            ep,
            result,
            report,
            worlds[ep.world_key],
            randcfg=config.randcfg,
            iteration=iteration,
            keyframe_offset=config.keyframe_offset,
        )
        if record is None:
            continue
        train_samples = datagen.correction_to_samples(record) if include_correction_samples else []
        bundles.append(
            datagen.CorrectionBundle(
                record=record,
                train_samples=train_samples,
                perception_samples=datagen.make_perception(record, annotator),
            )
        )
    return bundles, deviations


def run_iteration(
    model,
    train_episodes,
    worlds,
    config: FlywheelConfig,
    iteration_index: int,
    annotator,
    oracle_pool,
    run_dir: Path | None = None,
    include_correction_samples: bool = True,
    use_sample_mix: bool = True,
):
    """One flywheel round. Returns (new model, iteration entry dict).

    Zero detected deviations makes the round a warned no-op.
    ``use_sample_mix=False`` trains on every correction with no oracle
    re-mix (ablation switch)."""
    results = evaluate_split(model, train_episodes, worlds, config.randcfg, config.max_steps)
    train_summary = split_summary(results)
    bundles, deviations = collect_corrections(
        results, train_episodes, worlds, config, annotator, iteration_index,
        include_correction_samples=include_correction_samples,
    )
    entry = {
        "index": iteration_index,
        "train": train_summary.as_row(),
        "deviations": deviations,
        "corrections": len(bundles),
    }
    if run_dir is not None:
        iter_dir = Path(run_dir) / f"iter_{iteration_index}"
        iter_dir.mkdir(parents=True, exist_ok=True)
        _write_trajectories(iter_dir / "trajectories.jsonl", train_episodes, results)
    if deviations == 0:
        log.warning("iteration %d: no deviations detected; model unchanged", iteration_index)
        entry.update({"sampled_corrections": 0, "oracle_added": 0, "dataset_counts": {}, "no_op": True})
        if run_dir is not None:
            policy_mod.save(model, Path(run_dir) / f"iter_{iteration_index}" / "model.ckpt")
            entry["checkpoint"] = f"iter_{iteration_index}/model.ckpt"
        return model, entry
    if use_sample_mix:
        mixed = datagen.sample_mix(
            bundles, oracle_pool, seed=_iteration_seed(config, iteration_index, 1)
        )
    else:
        mixed = datagen.MixedDataset(
            correction_samples=[s for b in bundles for s in b.train_samples],
            oracle_samples=[],
            perception_samples=[s for b in bundles for s in b.perception_samples],
            instruction_samples=[],
            detected=len(bundles),
            sampled_corrections=len(bundles),
            oracle_added=0,
        )
    entry.update(
        {
            "sampled_corrections": mixed.sampled_corrections,
            "oracle_added": mixed.oracle_added,
            "no_op": False,
        }
    )
    new_model = model
    if mixed.train_samples or mixed.perception_samples or mixed.instruction_samples:
        new_model = policy_mod.train(
            model,
            mixed.train_samples,
            mixed.perception_samples,
            epochs=config.train_epochs,
            learning_rate=config.learning_rate,
            seed=_iteration_seed(config, iteration_index, 2),
            instruction_samples=mixed.instruction_samples,
        )
    else:
        log.warning("iteration %d: empty mixed dataset; model unchanged", iteration_index)
    if run_dir is not None:
        iter_dir = Path(run_dir) / f"iter_{iteration_index}"
        counts = datagen.write_dataset(
            iter_dir / "dataset.jsonl",
            oracle_samples=mixed.oracle_samples,
            correction_samples=mixed.correction_samples,
            perception_samples=mixed.perception_samples,
        )
        entry["dataset_counts"] = counts
        policy_mod.save(new_model, iter_dir / "model.ckpt")
        entry["checkpoint"] = f"iter_{iteration_index}/model.ckpt"
    else:
        entry["dataset_counts"] = {
            "oracle_sample": len(mixed.oracle_samples),
            "correction_sample": len(mixed.correction_samples),
            "perception_sample": len(mixed.perception_samples),
        }
    return new_model, entry


def _write_trajectories(path, episodes, results) -> None:
    with open(path, "w") as fh:
        for ep, r in zip(episodes, results):
            fh.write(
                json.dumps(
                    {
                        "episode_id": ep.id,
                        "points": r.trajectory.points.tolist(),
                        "failed": r.failed,
                        "metrics": {
                            "ne": r.metrics.ne,
                            "success": r.metrics.success,
                            "oracle_success": r.metrics.oracle_success,
                            "spl": r.metrics.spl,
                            "ndtw": r.metrics.ndtw,
                        },
                    }
                )
                + "\n"
            )


def run_flywheel(
    model,
    config: FlywheelConfig,
    worlds,
    train_episodes,
    val_episodes,
    annotator=None,
    oracle_pool=(),
    run_dir: Path | None = None,
    include_correction_samples: bool = True,
    use_sample_mix: bool = True,
):
    """Iterate the flywheel; returns (best model, run record dict).

    With stop_on_drop, a validation SR drop versus the previous iteration
    halts the loop; the best checkpoint is the argmax of validation SR over
    completed iterations."""
    annotator = annotator or datagen.StubAnnotator()
    timings = []
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    baseline = split_summary(
        evaluate_split(model, val_episodes, worlds, config.randcfg, config.max_steps)
    )
    timings.append({"phase": "baseline_eval", "seconds": time.monotonic() - t0})
    record = {
        "config": config.to_json(),
        "baseline": {"val": baseline.as_row()},
        "iterations": [],
        "best_iteration": None,
        "stopped_early": False,
    }
    models = []
    current = model
    for i in range(1, config.iterations + 1):
        t0 = time.monotonic()
        current, entry = run_iteration(
            current,
            train_episodes,
            worlds,
            config,
            i,
            annotator,
            oracle_pool,
            run_dir=run_dir,
            include_correction_samples=include_correction_samples,
            use_sample_mix=use_sample_mix,
        )
        val_summary = split_summary(
            evaluate_split(current, val_episodes, worlds, config.randcfg, config.max_steps)
        )
        entry["val"] = val_summary.as_row()
        record["iterations"].append(entry)
        models.append(current)
        timings.append({"phase": f"iteration_{i}", "seconds": time.monotonic() - t0})
        if (
            config.stop_on_drop
            and len(record["iterations"]) >= 2
            and entry["val"]["sr"] < record["iterations"][-2]["val"]["sr"]
        ):
            record["stopped_early"] = True
            log.info("validation SR dropped at iteration %d; stopping", i)
            break
    srs = [e["val"]["sr"] for e in record["iterations"]]
    best_idx = int(np.argmax(srs))
    record["best_iteration"] = record["iterations"][best_idx]["index"]
    best_model = models[best_idx]
    if run_dir is not None:
        with open(run_dir / "run.json", "w") as fh:
            json.dump(record, fh, indent=2)
            fh.write("\n")
        with open(run_dir / "timings.json", "w") as fh:
            json.dump(timings, fh, indent=2)
            fh.write("\n")
        policy_mod.save(best_model, run_dir / "best_model.ckpt")
    return best_model, record
