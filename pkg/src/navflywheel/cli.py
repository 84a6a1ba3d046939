"""Operator command line: world/episode generation, training, evaluation,
flywheel runs, and report emission.

Exit codes: 0 success, 1 usage error, 2 runtime failure. With
``--json-errors`` failures are emitted to stderr as one JSON object.
"""

from __future__ import annotations

import json
import math
import os
import sys
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import datagen, flywheel as flywheel_mod, metrics as metrics_mod, policy as policy_mod, reporting
from .world import RandomizationConfig, generate_world, world_from_json, world_to_json

ANNOTATOR_URL_ENV = "NAVFLYWHEEL_ANNOTATOR_URL"
ANNOTATOR_TOKEN_ENV = "NAVFLYWHEEL_ANNOTATOR_TOKEN"


class ConfigError(click.UsageError):
    pass


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from exc


def _cfg(ctx, key, flag_value, default):
    """Flag wins over config file wins over default."""
    if flag_value is not None:
        return flag_value
    return ctx.obj["config"].get(key, default)


def _randcfg(ctx, visibility_range, bearing_jitter, landmark_dropout, distance_bin_noise, seed):
    return RandomizationConfig(
        visibility_range=_cfg(ctx, "visibility_range", visibility_range, 8.0),
        bearing_jitter=_cfg(ctx, "bearing_jitter", bearing_jitter, 0.0),
        landmark_dropout=_cfg(ctx, "landmark_dropout", landmark_dropout, 0.0),
        distance_bin_noise=_cfg(ctx, "distance_bin_noise", distance_bin_noise, 0.0),
        seed=seed,
    )


def _annotator():
    url = os.environ.get(ANNOTATOR_URL_ENV)
    if url:
        return datagen.HttpAnnotator(url, token=os.environ.get(ANNOTATOR_TOKEN_ENV, ""))
    return datagen.StubAnnotator()


def _echo_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


_noise_options = [
    click.option("--visibility-range", type=float, default=None),
    click.option("--bearing-jitter", type=float, default=None),
    click.option("--landmark-dropout", type=float, default=None),
    click.option("--distance-bin-noise", type=float, default=None),
]


def noise_options(fn):
    for opt in reversed(_noise_options):
        fn = opt(fn)
    return fn


@click.group()
@click.option("--config", type=click.Path(), default=None, help="TOML config; flags override it.")
@click.option("--json-errors", is_flag=True, default=False)
@click.option("--jobs", type=int, default=1, help="Worker cap (reserved; evaluation is sequential).")
@click.pass_context
def cli(ctx, config, json_errors, jobs):
    ctx.ensure_object(dict)
    ctx.obj["config"] = _load_config(config)
    ctx.obj["json_errors"] = json_errors
    ctx.obj["jobs"] = jobs


@cli.command("world")
@click.option("--seed", type=int, default=None)
@click.option("--size", type=int, default=None)
@click.option("--density", type=float, default=None)
@click.option("--landmarks", type=int, default=None)
@click.option("--cell-size", type=float, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def cmd_world(ctx, seed, size, density, landmarks, cell_size, out):
    """Generate a world and write it as JSON."""
    world = generate_world(
        seed=_cfg(ctx, "seed", seed, 0),
        size=_cfg(ctx, "size", size, 20),
        obstacle_density=_cfg(ctx, "density", density, 0.1),
        landmark_count=_cfg(ctx, "landmarks", landmarks, 4),
        cell_size=_cfg(ctx, "cell_size", cell_size, 0.5),
    )
    with open(out, "w") as fh:
        fh.write(world_to_json(world))
    click.echo(f"wrote {out}")


def _read_world(path):
    with open(path) as fh:
        return world_from_json(fh.read())


@cli.command("data")
@click.option("--world", "world_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--count", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--min-path-length", type=float, default=None)
@click.option("--out-dir", type=click.Path(), required=True)
@noise_options
@click.pass_context
def cmd_data(ctx, world_path, count, seed, min_path_length, out_dir,
             visibility_range, bearing_jitter, landmark_dropout, distance_bin_noise):
    """Generate episodes plus the oracle training dataset (JSONL + manifest)."""
    world = _read_world(world_path)
    seed = _cfg(ctx, "seed", seed, 0)
    count = _cfg(ctx, "count", count, 50)
    min_path_length = _cfg(ctx, "min_path_length", min_path_length, 0.0)
    randcfg = _randcfg(ctx, visibility_range, bearing_jitter, landmark_dropout, distance_bin_noise, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    episodes = datagen.generate_episodes(world, count, seed, min_path_length=min_path_length)
    datagen.write_episodes(out / "episodes.jsonl", episodes)
    oracle_samples = []
    for ep in episodes:
        oracle_samples.extend(datagen.oracle_to_samples(ep, world, randcfg).train_samples)
    counts = datagen.write_dataset(out / "dataset.jsonl", oracle_samples=oracle_samples)
    counts["episodes"] = len(episodes)
    datagen.write_manifest(out / "manifest.json", counts, {"seed": seed, "randcfg_seed": randcfg.seed}, 0)
    _echo_config(out, {"command": "data", "seed": seed, "count": count,
                       "min_path_length": min_path_length, "world": str(world_path)})
    click.echo(f"wrote {counts['episodes']} episodes, {counts['oracle_sample']} samples to {out}")


@cli.command("train")
@click.option("--world", "world_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--episodes", "episodes_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@noise_options
@click.pass_context
def cmd_train(ctx, world_path, episodes_path, out, seed, epochs, learning_rate,
              visibility_range, bearing_jitter, landmark_dropout, distance_bin_noise):
    """Train a fresh policy on oracle episodes; writes a checkpoint."""
    world = _read_world(world_path)
    episodes = datagen.read_episodes(episodes_path)
    seed = _cfg(ctx, "seed", seed, 0)
    randcfg = _randcfg(ctx, visibility_range, bearing_jitter, landmark_dropout, distance_bin_noise, seed)
    samples, instr = [], []
    for ep in episodes:
        group = datagen.oracle_to_samples(ep, world, randcfg)
        samples.extend(group.train_samples)
        instr.append(group.instruction_sample)
    model = policy_mod.PolicyModel.initial()
    model = policy_mod.train(
        model,
        samples,
        epochs=_cfg(ctx, "epochs", epochs, None),
        learning_rate=_cfg(ctx, "learning_rate", learning_rate, None),
        seed=seed,
        instruction_samples=instr,
    )
    policy_mod.save(model, out)
    click.echo(f"trained on {len(samples)} samples; checkpoint at {out}")


@cli.command("eval")
@click.option("--world", "world_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--episodes", "episodes_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--max-steps", type=int, default=None)
@noise_options
@click.pass_context
def cmd_eval(ctx, world_path, episodes_path, model_path, out_dir, seed, max_steps,
             visibility_range, bearing_jitter, landmark_dropout, distance_bin_noise):
    """Evaluate a checkpoint; writes metrics.csv / metrics.json."""
    world = _read_world(world_path)
    episodes = datagen.read_episodes(episodes_path)
    model = policy_mod.load(model_path)
    seed = _cfg(ctx, "seed", seed, 0)
    randcfg = _randcfg(ctx, visibility_range, bearing_jitter, landmark_dropout, distance_bin_noise, seed)
    worlds = {ep.world_key: world for ep in episodes}
    results = flywheel_mod.evaluate_split(
        model, episodes, worlds, randcfg, max_steps=_cfg(ctx, "max_steps", max_steps, 200)
    )
    summary = flywheel_mod.split_summary(results)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_mod.summary_to_csv(summary, out / "metrics.csv")
    metrics_mod.summary_to_json(summary, out / "metrics.json")
    _echo_config(out, {"command": "eval", "seed": seed, "model": str(model_path),
                       "episodes": str(episodes_path), "world": str(world_path)})
    click.echo(
        f"sr={summary.sr:.1f} ne={summary.ne:.2f} spl={summary.spl:.1f} ndtw={summary.ndtw:.1f}"
    )


@cli.command("flywheel")
@click.option("--world", "world_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--train-episodes", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--val-episodes", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--iterations", type=int, default=None)
@click.option("--threshold-s", type=float, default=None)
@click.option("--spacing", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--max-steps", type=int, default=None)
@click.option("--out-dir", type=click.Path(), required=True)
@noise_options
@click.pass_context
def cmd_flywheel(ctx, world_path, train_episodes, val_episodes, model_path, iterations,
                 threshold_s, spacing, seed, max_steps, out_dir,
                 visibility_range, bearing_jitter, landmark_dropout, distance_bin_noise):
    """Run self-correction iterations from a base checkpoint."""
    world = _read_world(world_path)
    train_eps = datagen.read_episodes(train_episodes)
    val_eps = datagen.read_episodes(val_episodes)
    model = policy_mod.load(model_path)
    seed = _cfg(ctx, "seed", seed, 0)
    randcfg = _randcfg(ctx, visibility_range, bearing_jitter, landmark_dropout, distance_bin_noise, seed)
    config = flywheel_mod.FlywheelConfig(
        iterations=_cfg(ctx, "iterations", iterations, 3),
        threshold_s=_cfg(ctx, "threshold_s", threshold_s, 1.0),
        spacing=_cfg(ctx, "spacing", spacing, 0.05),
        seed=seed,
        max_steps=_cfg(ctx, "max_steps", max_steps, 200),
        randcfg=randcfg,
    )
    worlds = {ep.world_key: world for ep in train_eps + val_eps}
    oracle_pool = [datagen.oracle_to_samples(ep, world, randcfg) for ep in train_eps]
    out = Path(out_dir)
    _echo_config(out, {"command": "flywheel", **config.to_json(),
                       "world": str(world_path), "model": str(model_path)})
    _, record = flywheel_mod.run_flywheel(
        model, config, worlds, train_eps, val_eps,
        annotator=_annotator(), oracle_pool=oracle_pool, run_dir=out,
    )
    best = record["best_iteration"]
    click.echo(f"completed {len(record['iterations'])} iteration(s); best iteration {best}")


@cli.command("report")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out-dir", type=click.Path(), default=None)
@click.pass_context
def cmd_report(ctx, run_dir, out_dir):
    """Render report.csv and report.svg from a flywheel run directory."""
    out_dir = out_dir or run_dir
    record = reporting.write_report(run_dir, out_dir)
    click.echo(
        f"report for {len(record['iterations'])} iteration(s) written to {out_dir}"
    )


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    json_errors = "--json-errors" in argv
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
        return 0
    except click.exceptions.Abort:
        return 1
    except (click.UsageError, FileNotFoundError) as exc:
        _emit_error(exc, json_errors, usage=True)
        return 1
    except Exception as exc:  # runtime failure
        _emit_error(exc, json_errors, usage=False)
        return 2


def _emit_error(exc, json_errors: bool, usage: bool) -> None:
    if json_errors:
        sys.stderr.write(
            json.dumps(
                {"error": type(exc).__name__, "message": str(exc), "usage_error": usage}
            )
            + "\n"
        )
    else:
        sys.stderr.write(f"error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
