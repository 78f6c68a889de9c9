"""Command-line entry points.

    twinbench run-experiment --config cell.json --out results/
    twinbench render-scene   --config cell.json --out scene.png
    twinbench serve          --config cell.json --bind 127.0.0.1:8000
    twinbench replay         --trace results/trials.jsonl

The config file is one structured document (schema in
docs/config-schema.md); only the language-model endpoint secret comes
from environment variables.
"""

from __future__ import annotations

import json
import sys

import click
import numpy as np
from PIL import Image

from .console import serve_console
from .harness import (
    ExperimentConfig,
    draw_placement,
    load_config,
    render_table,
    run_experiment,
)
from .scene import build_environment, render_frame
from .trial import RENDER, DROPOUT, WORLD, TrialRecord, substream


def _load(path: str) -> ExperimentConfig:
    try:
        return load_config(path)
    except ValueError as err:  # pydantic validation errors included
        raise click.ClickException(str(err)) from None


@click.group()
def main() -> None:
    """Digital-twin pick-and-place benchtop."""


@main.command("run-experiment")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Experiment config document.")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Directory for summary.json / trials.jsonl / table.txt.")
@click.option("--trials", type=int, default=None,
              help="Override the config's trial count.")
@click.option("--seed", type=int, default=None,
              help="Override the config's base seed.")
def run_experiment_cmd(config_path: str, out_dir: str,
                       trials: int | None, seed: int | None) -> None:
    """Run all trials of one experiment cell and write the results."""
    config = _load(config_path)
    updates: dict = {"output": out_dir}
    if trials is not None:
        updates["trials"] = trials
    if seed is not None:
        updates["base_seed"] = seed
    try:
        config = config.model_copy(update=updates)
        config = ExperimentConfig.model_validate(config.model_dump())
    except ValueError as err:
        raise click.ClickException(str(err)) from None
    summary, _ = run_experiment(config)
    click.echo(render_table([(cell_name(config), summary)]))
    click.echo(f"results written to {out_dir}")


def cell_name(config: ExperimentConfig) -> str:
    return (f"{config.environment.kind}/{config.pipeline.segmenter}"
            f"+{config.pipeline.pose_estimator}/{config.loop_mode}")


@main.command("render-scene")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_png", required=True, type=click.Path(),
              help="Output PNG path.")
def render_scene_cmd(config_path: str, out_png: str) -> None:
    """Render the first trial's color frame to a PNG."""
    config = _load(config_path)
    env = config.environment.build()
    placement = draw_placement(config.task, env,
                               substream(config.base_seed, WORLD))
    world = build_environment(env, placement)
    frame = render_frame(
        world,
        render_seed=np.random.SeedSequence([config.base_seed, RENDER, 1]),
        dropout_seed=np.random.SeedSequence([config.base_seed, DROPOUT, 1]),
        frame_id=1)
    try:
        Image.fromarray(frame.color).save(out_png, format="PNG")
    except OSError as err:
        raise click.ClickException(f"cannot write {out_png}: {err}") from None
    click.echo(f"wrote {frame.color.shape[1]}x{frame.color.shape[0]} "
               f"frame to {out_png}")


@main.command("serve")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--bind", default="127.0.0.1:8000", show_default=True,
              help="host:port to listen on.")
@click.option("--ui", "ui_dir", default=None,
              type=click.Path(exists=True, file_okay=False),
              help="Directory with a built console UI to host at /.")
def serve_cmd(config_path: str, bind: str, ui_dir: str | None) -> None:
    """Host the interactive supervisor console for one experiment."""
    config = _load(config_path)
    try:
        serve_console(config, bind, ui_dir=ui_dir)
    except ValueError as err:
        raise click.ClickException(str(err)) from None


@main.command("replay")
@click.option("--trace", "trace_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="trials.jsonl (or a single-record json) to replay.")
def replay_cmd(trace_path: str) -> None:
    """Print a recorded trial's actions and feedback step by step."""
    try:
        with open(trace_path, encoding="utf-8") as fh:
            lines = [line for line in fh.read().splitlines() if line.strip()]
    except OSError as err:
        raise click.ClickException(str(err)) from None
    if not lines:
        raise click.ClickException(f"{trace_path} holds no trial records")
    for line in lines:
        try:
            record = TrialRecord.from_json(line)
        except (ValueError, KeyError) as err:
            raise click.ClickException(
                f"not a trial record: {err}") from None
        click.echo(f"trial {record.trial_index} seed {record.seed} "
                   f"[{record.loop_mode}] {record.task!r}")
        for raw in record.action_trace:
            click.echo(f"  {_format_trace_line(json.loads(raw))}")
        verdict = ("success" if record.success
                   else f"{record.failure_mode}: {record.failure_reason}")
        click.echo(f"  => {verdict} "
                   f"({record.planning_steps} steps, "
                   f"{record.adjustments_used} corrections)")


def _format_trace_line(doc: dict) -> str:
    t = doc.get("t", "?")
    kind = doc.get("kind", "?")
    if kind == "action":
        action = doc["action"]
        args = action.get("arguments") or {}
        arg_text = ", ".join(f"{k}={v}" for k, v in sorted(args.items()))
        return (f"t{t:>3} action   {action['action']}({arg_text}) "
                f"-> {doc.get('outcome', '')}")
    if kind == "feedback":
        fb = doc["feedback"]
        args = fb.get("arguments") or {}
        arg_text = ", ".join(str(v) for v in args.values())
        return f"t{t:>3} feedback {fb['feedback']}({arg_text})"
    if kind == "result":
        state = "success" if doc.get("success") else doc.get("failure_mode")
        reason = doc.get("reason") or ""
        return f"t{t:>3} result   {state} {reason}".rstrip()
    rest = {k: v for k, v in doc.items() if k not in ("t", "kind")}
    return f"t{t:>3} {kind:<8} {json.dumps(rest, sort_keys=True)}"


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
