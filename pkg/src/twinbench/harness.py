"""Experiment runner: seeded trial batches, aggregation, and results files.

A run is a list of independent trials.  Trial ``i`` derives everything from
``base_seed + i``: the object placement, the calibration error, and every
noise stream inside the trial loop.  Two runs of the same configuration
therefore produce byte-identical records, and two configurations sharing a
base seed face identical scenes trial for trial — paired comparison.
"""

from __future__ import annotations

import json
import os
import traceback
from dataclasses import dataclass
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .perception import (
    CorruptionConfig,
    DomainLimitedConfig,
    PerceptionPipeline,
    PoseNoiseConfig,
)
from .planner import LlmEndpoint, LlmPlanner, RulePlanner
from .registration import IcpConfig
from .robot import HandEyeCalibration, MotionConfig
from .scene import EnvironmentConfig, Placement, build_environment
from .trial import (
    CALIB,
    WORLD,
    DEFAULT_STEP_CEILING,
    SUPERVISOR_TOLERANCE,
    ScriptedSupervisor,
    TrialRecord,
    TrialSetup,
    TrialTask,
    run_trial_loop,
    substream,
)

PEG_NAMES = tuple(f"peg_{i:02d}" for i in range(12))


# ---------------------------------------------------------------------------
# configuration document


class EnvironmentModel(BaseModel):
    """Scene portion of the config file; mirrors EnvironmentConfig."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["ideal", "blackRedBlock", "tiltedPegboard", "gauze"] = "ideal"
    tilt_degrees: float = 0.0
    block_colors: Optional[tuple[str, ...]] = None
    depth_noise_sigma: float = 0.0005
    ir_dropout_prob: float = 0.5

    def build(self) -> EnvironmentConfig:
        kwargs = dict(environment=self.kind, tilt_degrees=self.tilt_degrees,
                      depth_noise_sigma=self.depth_noise_sigma,
                      ir_dropout_prob=self.ir_dropout_prob)
        if self.block_colors is not None:
            kwargs["block_colors"] = self.block_colors
        elif self.kind == "blackRedBlock":
            kwargs["block_colors"] = ("black", "red")
        if self.kind == "tiltedPegboard" and self.tilt_degrees == 0.0:
            kwargs["tilt_degrees"] = 15.0
        return EnvironmentConfig(**kwargs)


# what a task-specific trained detector has seen, by training task
TRAINED_DOMAINS = {
    "pegTransfer": frozenset(
        {("block", color, "pegTransfer")
         for color in ("yellow", "black", "red")}
        | {("peg", "grey", "pegTransfer")}),
    "gauzeRetrieval": frozenset({("gauze", "white", "gauzeRetrieval")}),
}


class PipelineModel(BaseModel):
    """Perception portion of the config file; mirrors PerceptionPipeline."""

    model_config = ConfigDict(extra="forbid")

    segmenter: Literal["depthThreshold", "oracleFoundation",
                       "domainLimited"] = "depthThreshold"
    pose_estimator: Literal["icp", "oraclePose"] = "icp"
    trained_domain: Optional[Literal["pegTransfer",
                                     "gauzeRetrieval"]] = None
    boundary_erode_px: int = 0
    miss_prob: float = 0.0
    partial_mask_prob: float = 0.0
    pose_noise_sigma_t: float = 0.0
    pose_noise_sigma_r_deg: float = 0.0
    icp_max_iterations: int = 50

    @model_validator(mode="after")
    def _check_domain(self) -> "PipelineModel":
        if self.segmenter == "domainLimited" and self.trained_domain is None:
            raise ValueError(
                "domainLimited segmenter needs trained_domain")
        if self.segmenter != "domainLimited" and self.trained_domain:
            raise ValueError(
                "trained_domain only applies to the domainLimited segmenter")
        return self

    def build(self, task: str = "pegTransfer") -> PerceptionPipeline:
        domain = None
        if self.segmenter == "domainLimited":
            domain = DomainLimitedConfig(
                trained_classes=TRAINED_DOMAINS[self.trained_domain],
                environment=task)
        return PerceptionPipeline(
            segmenter=self.segmenter,
            pose_estimator=self.pose_estimator,
            corruption=CorruptionConfig(
                boundary_erode_px=self.boundary_erode_px,
                miss_prob=self.miss_prob,
                partial_mask_prob=self.partial_mask_prob),
            pose_noise=PoseNoiseConfig(
                sigma_t=self.pose_noise_sigma_t,
                sigma_r_deg=self.pose_noise_sigma_r_deg),
            icp=IcpConfig(max_iterations=self.icp_max_iterations),
            domain=domain)


class LlmModel(BaseModel):
    """Planner endpoint; the bearer token only ever comes from the env."""

    model_config = ConfigDict(extra="forbid")

    url: Optional[str] = None  # None -> TWINBENCH_LLM_ENDPOINT
    model: str = "planner"
    timeout_seconds: float = 30.0


class ExperimentConfig(BaseModel):
    """One experiment cell: a task, an environment, a pipeline, a loop."""

    model_config = ConfigDict(extra="forbid")

    task: Literal["pegTransfer", "gauzeRetrieval"] = "pegTransfer"
    environment: EnvironmentModel = Field(default_factory=EnvironmentModel)
    pipeline: PipelineModel = Field(default_factory=PipelineModel)
    planner: Literal["rule", "llm"] = "rule"
    llm: LlmModel = Field(default_factory=LlmModel)
    loop_mode: Literal["open", "closed"] = "closed"
    supervisor: Literal["scripted", "interactive"] = "scripted"
    trials: int = Field(default=1, ge=1)
    base_seed: int = 0
    output: Optional[str] = None
    task_block_color: Optional[str] = None  # default: first configured color
    execution_noise_sigma: float = 0.0005
    calibration_noise_sigma_t: float = 0.0
    calibration_noise_sigma_r_deg: float = 0.0
    supervisor_tolerance: float = SUPERVISOR_TOLERANCE
    step_ceiling: int = DEFAULT_STEP_CEILING

    @model_validator(mode="after")
    def _check_cross_fields(self) -> "ExperimentConfig":
        if self.supervisor == "interactive" and self.loop_mode != "closed":
            raise ValueError("an interactive supervisor requires a closed loop")
        if self.task == "gauzeRetrieval" and self.environment.kind != "gauze":
            raise ValueError("gauze retrieval runs in the gauze environment")
        return self

    def build_planner(self):
        if self.planner == "rule":
            return RulePlanner()
        if self.llm.url is not None:
            endpoint = LlmEndpoint(url=self.llm.url, model=self.llm.model,
                                   token=os.environ.get("TWINBENCH_LLM_TOKEN"),
                                   timeout=self.llm.timeout_seconds)
        else:
            endpoint = LlmEndpoint.from_env()
        return LlmPlanner(endpoint)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return ExperimentConfig.model_validate_json(fh.read())
    except OSError as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# placement randomization


def draw_placement(task: str, env: EnvironmentConfig, rng) -> Placement:
    """Per-trial scene randomization from the trial's world stream."""
    if task == "gauzeRetrieval":
        xy = rng.uniform(-0.02, 0.02, size=2)
        return Placement(gauze_xy=(float(xy[0]), float(xy[1])))
    colors = env.block_colors
    chosen = rng.choice(len(PEG_NAMES), size=len(colors) + 1, replace=False)
    block_pegs = {f"block_{color}": PEG_NAMES[int(chosen[i])]
                  for i, color in enumerate(colors)}
    return Placement(block_pegs=block_pegs,
                     target_peg=PEG_NAMES[int(chosen[-1])])


def task_for(config: ExperimentConfig, placement: Placement) -> TrialTask:
    if config.task == "gauzeRetrieval":
        return TrialTask.gauze_retrieval()
    color = config.task_block_color or config.environment.build().block_colors[0]
    return TrialTask.peg_transfer(color, placement.target_peg)


# ---------------------------------------------------------------------------
# running


def run_single_trial(config: ExperimentConfig, trial_index: int,
                     planner=None, supervisor=None,
                     observer=None) -> TrialRecord:
    """Run one seeded trial; any crash inside is recorded as a Pl failure."""
    seed = config.base_seed + trial_index
    env = config.environment.build()
    placement = draw_placement(config.task, env, substream(seed, WORLD))
    task = task_for(config, placement)
    try:
        world = build_environment(env, placement)
        calib = HandEyeCalibration.calibrate(
            world.camera_pose,
            sigma_t=config.calibration_noise_sigma_t,
            sigma_r_deg=config.calibration_noise_sigma_r_deg,
            rng=substream(seed, CALIB)
            if (config.calibration_noise_sigma_t
                or config.calibration_noise_sigma_r_deg) else None)
        if supervisor is None and config.loop_mode == "closed":
            supervisor = ScriptedSupervisor(config.supervisor_tolerance)
        record = run_trial_loop(TrialSetup(
            world=world,
            pipeline=config.pipeline.build(config.task),
            planner=planner if planner is not None else config.build_planner(),
            task=task,
            loop_mode=config.loop_mode,
            supervisor=supervisor,
            calib=calib,
            motion=MotionConfig(
                execution_noise_sigma=config.execution_noise_sigma),
            trial_index=trial_index,
            seed=seed,
            step_ceiling=config.step_ceiling,
            observer=observer))
        return record
    except Exception as exc:  # noqa: BLE001 - a crashed trial must not kill the run
        detail = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return TrialRecord(
            trial_index=trial_index, seed=seed, task=task.command,
            loop_mode=config.loop_mode, success=False, planning_steps=0,
            adjustments_used=0, failure_mode="Pl",
            failure_reason=f"trial crashed: {detail}",
            action_trace=(json.dumps(
                {"t": 0, "kind": "crash", "error": detail},
                sort_keys=True),))


@dataclass(frozen=True)
class ExperimentSummary:
    """Aggregates of one experiment cell, one row of the results table."""

    trial_count: int
    success_count: int
    avg_planning_steps: float
    po_count: int
    de_count: int
    pl_count: int

    def __post_init__(self):
        total = self.success_count + self.po_count + self.de_count + self.pl_count
        if total != self.trial_count:
            raise ValueError(
                f"counts {total} do not add up to {self.trial_count} trials")

    @property
    def success_rate(self) -> float:
        return self.success_count / self.trial_count if self.trial_count else 0.0

    @classmethod
    def from_records(cls, records) -> "ExperimentSummary":
        records = list(records)
        modes = [r.failure_mode for r in records]
        steps = [r.planning_steps for r in records]
        return cls(trial_count=len(records),
                   success_count=sum(r.success for r in records),
                   avg_planning_steps=(sum(steps) / len(steps))
                   if records else 0.0,
                   po_count=modes.count("Po"),
                   de_count=modes.count("De"),
                   pl_count=modes.count("Pl"))

    def row(self) -> dict:
        """Row cells in the results-table schema."""
        return {
            "success_rate": f"{round(100 * self.success_rate):.0f}% "
                            f"({self.success_count}/{self.trial_count})",
            "avg_planning_steps": f"{self.avg_planning_steps:.2f}",
            "failure_modes": f"{self.po_count}, {self.de_count}, "
                             f"{self.pl_count}",
        }


def run_experiment(config: ExperimentConfig,
                   planner=None) -> tuple[ExperimentSummary, list[TrialRecord]]:
    """Run all trials of one cell; emit files when the config names an output."""
    records = [run_single_trial(config, i, planner=planner)
               for i in range(config.trials)]
    summary = ExperimentSummary.from_records(records)
    if config.output:
        emit_results(summary, records, config.output)
    return summary, records


# ---------------------------------------------------------------------------
# results files


def emit_results(summary: ExperimentSummary, records, out_dir: str,
                 label: str = "experiment") -> dict:
    """Write summary.json + trials.jsonl + table.txt; stable byte-for-byte."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        summary_path = os.path.join(out_dir, "summary.json")
        trials_path = os.path.join(out_dir, "trials.jsonl")
        table_path = os.path.join(out_dir, "table.txt")
        doc = {
            "label": label,
            "trials": summary.trial_count,
            "successes": summary.success_count,
            "success_rate": round(summary.success_rate, 6),
            "avg_planning_steps": round(summary.avg_planning_steps, 6),
            "failure_counts": {"Po": summary.po_count, "De": summary.de_count,
                               "Pl": summary.pl_count},
            "row": summary.row(),
        }
        with open(summary_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        with open(trials_path, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(record.to_json() + "\n")
        with open(table_path, "w", encoding="utf-8") as fh:
            fh.write(render_table([(label, summary)]) + "\n")
        return {"summary": summary_path, "trials": trials_path,
                "table": table_path}
    except OSError as exc:
        raise OSError(f"cannot write results under {out_dir}: {exc}") from exc


def render_table(rows: list[tuple[str, ExperimentSummary]]) -> str:
    """Plain-text results table, one labeled summary per row."""
    header = ("Cell", "Success Rate", "Avg Planning Steps", "Po, De, Pl")
    body = [(label, *(s.row().values())) for label, s in rows]
    widths = [max(len(str(r[i])) for r in [header, *body])
              for i in range(len(header))]
    def fmt(cells):
        return " | ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    ruler = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), ruler, *(fmt(r) for r in body)])
