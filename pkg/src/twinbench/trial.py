"""One complete trial: plan, validate, execute, feedback, classify.

The loop alternates planner and robot, consulting the supervisor after
reach, adjust, and pick actions in closed-loop mode; open loop executes
the plan once without feedback. Every trial produces a TrialRecord with a
line-delimited action trace (logically timestamped, so identical
configurations reproduce byte-identical records) and, on failure, exactly
one failure mode: De when a required object was not detected at the
decisive observation, Pl for protocol/planner faults, Po otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose6
from .perception import PerceptionPipeline, PromptPolicy, generate_prompts, perceive
from .planner import (
    HistoryEntry,
    ParsedTask,
    PlannerContext,
    PlannerGiveUp,
    parse_task,
    resolve_targets,
)
from .protocol import (
    ACTION_CATALOG_V1,
    Action,
    Adjust,
    AdjustPosition,
    Answer,
    Confirm,
    Feedback,
    GetObservations,
    Inquiry,
    PickTarget,
    ProtocolState,
    ReachTarget,
    Redo,
    ReleaseObject,
    action_to_payload,
    advance_state,
    consume_redo_budget,
    feedback_to_payload,
    validate_action,
)
from .robot import (
    PLACE_CLEARANCE,
    HandEyeCalibration,
    MotionConfig,
    RobotState,
    adjust_tooltip,
    reach_pose,
    set_jaw,
    two_stage_reach,
)
from .scene import (
    BLOCK_EDGE,
    PEG_HEIGHT,
    WorldState,
    ground_truth,
    render_frame,
)
from .twinstore import TwinStore, serialize_scene

# substream purposes: every random decision in a trial draws from a
# dedicated stream keyed by (trial seed, purpose[, frame]) so changing one
# mechanism never perturbs another
RENDER, DROPOUT, WORLD, PROMPTS, SEGCORRUPT, POSE_NOISE, EXEC, CALIB = range(8)

SUPERVISOR_TOLERANCE = 0.002  # meters, L-infinity
DEFAULT_STEP_CEILING = 30
START_TOOLTIP = (0.0, 0.0, 0.15)  # base frame, above the board center


def substream(trial_seed: int, purpose: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(trial_seed), int(purpose), *extra]))


def reading_index_for_peg(peg_name: str) -> int:
    """Reading-order number (1..12) of a peg from its scene name.

    Must agree with the camera-side numbering the planner derives from
    perceived positions (top-left of the image is 1).
    """
    i = int(peg_name.split("_")[1])
    row, col = i // 3, i % 3
    return (3 - row) * 3 + col + 1


@dataclass(frozen=True)
class TrialTask:
    """What this trial asks for, in both natural language and scene names."""

    kind: str  # pegTransfer | gauzeRetrieval
    command: str
    block_name: str | None = None  # scene name of the commanded block
    target_peg: str | None = None  # scene name of the commanded peg

    def __post_init__(self):
        if self.kind not in ("pegTransfer", "gauzeRetrieval"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "pegTransfer" and not (self.block_name
                                               and self.target_peg):
            raise ValueError("peg transfer needs a block and a target peg")

    @classmethod
    def peg_transfer(cls, block_color: str, target_peg: str) -> "TrialTask":
        return cls(kind="pegTransfer",
                   command=f"move block {block_color} to peg "
                           f"{reading_index_for_peg(target_peg)}",
                   block_name=f"block_{block_color}", target_peg=target_peg)

    @classmethod
    def gauze_retrieval(cls) -> "TrialTask":
        return cls(kind="gauzeRetrieval", command="pick up the gauze")


@dataclass(frozen=True)
class FeedbackRequest:
    """Everything a supervisor (scripted or human) sees when asked."""

    kind: str  # reach | pick | inquiry
    outcome: str
    tooltip_cam: tuple[float, float, float]
    true_target_cam: tuple[float, float, float] | None
    budget_remaining: int
    phase: str
    question: str | None = None


# camera-frame axis names, positive then negative per axis
_AXIS_DIRECTIONS = (("right", "left"), ("down", "up"), ("forward", "back"))


class ScriptedSupervisor:
    """Geometric oracle standing in for the human supervisor.

    Confirms when the tool tip is within ``tolerance`` (L-infinity) of the
    true target, otherwise directs one 3 mm step along the largest error
    component; orders a redo after a failed grasp while budget remains.
    Returning None signals an unrecoverable situation (budget exhausted).
    """

    name = "scripted"

    def __init__(self, tolerance: float = SUPERVISOR_TOLERANCE):
        if tolerance <= 0:
            raise ValueError("tolerance must be positive")
        self.tolerance = tolerance

    def feedback(self, request: FeedbackRequest) -> Feedback | None:
        if request.kind == "inquiry":
            return Answer("the supervisor cannot help with that")
        if request.kind == "pick":
            if request.outcome == "grasped":
                return Confirm()
            if request.budget_remaining > 0:
                return Redo()
            return None
        if request.kind != "reach":
            raise ValueError(f"unknown feedback request {request.kind!r}")
        error = np.asarray(request.true_target_cam) - np.asarray(
            request.tooltip_cam)
        if np.max(np.abs(error)) <= self.tolerance:
            return Confirm()
        if request.budget_remaining <= 0:
            return None
        axis = int(np.argmax(np.abs(error)))
        positive, negative = _AXIS_DIRECTIONS[axis]
        return Adjust(positive if error[axis] > 0 else negative)


def true_reach_target(world: WorldState, task: TrialTask,
                      mode: str) -> np.ndarray:
    """Camera-frame point where the tool tip truly belongs for this step."""
    if mode == "pick":
        name = task.block_name if task.kind == "pegTransfer" else "gauze"
        return ground_truth(world, name).grasp_point_cam
    peg_pose = ground_truth(world, task.target_peg).pose
    drop = -(PEG_HEIGHT / 2 + BLOCK_EDGE / 2 + PLACE_CLEARANCE)
    return peg_pose.apply((0.0, 0.0, drop))


def classify_failure(required_missing: str | None,
                     fault_kind: str | None) -> str:
    """Failure-mode precedence: detection, then planning, then pose."""
    if required_missing:
        return "De"
    if fault_kind in ("violation", "planner-failure", "ceiling"):
        return "Pl"
    return "Po"


@dataclass(frozen=True)
class TrialRecord:
    trial_index: int
    seed: int
    task: str
    loop_mode: str
    success: bool
    planning_steps: int
    adjustments_used: int
    failure_mode: str  # none | Po | De | Pl
    failure_reason: str
    action_trace: tuple[str, ...]

    def __post_init__(self):
        if self.failure_mode not in ("none", "Po", "De", "Pl"):
            raise ValueError(f"unknown failure mode {self.failure_mode!r}")
        if self.success != (self.failure_mode == "none"):
            raise ValueError("success and failure mode disagree")
        if not 0 <= self.adjustments_used <= 5:
            raise ValueError("adjustments_used out of range")

    def to_json(self) -> str:
        return json.dumps({
            "trial_index": self.trial_index, "seed": self.seed,
            "task": self.task, "loop_mode": self.loop_mode,
            "success": self.success, "planning_steps": self.planning_steps,
            "adjustments_used": self.adjustments_used,
            "failure_mode": self.failure_mode,
            "failure_reason": self.failure_reason,
            "action_trace": list(self.action_trace),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrialRecord":
        doc = json.loads(text)
        return cls(trial_index=doc["trial_index"], seed=doc["seed"],
                   task=doc["task"], loop_mode=doc["loop_mode"],
                   success=doc["success"],
                   planning_steps=doc["planning_steps"],
                   adjustments_used=doc["adjustments_used"],
                   failure_mode=doc["failure_mode"],
                   failure_reason=doc["failure_reason"],
                   action_trace=tuple(doc["action_trace"]))


class TrialObserver:
    """Live hooks for consumers that watch a trial as it runs.

    The console service implements these to stream frames, tool-tip
    positions, and trace lines to connected clients. All hooks are
    no-ops by default and must never influence the trial itself.
    """

    def on_snapshot(self, frame, scene, tooltip_cam) -> None:
        """A new observation was perceived (frame + twins + tool tip)."""

    def on_tooltip(self, tooltip_cam) -> None:
        """The tool tip moved (after a reach or an adjustment)."""

    def on_trace(self, line: str) -> None:
        """One action-trace line was recorded."""


@dataclass
class TrialSetup:
    """Everything run_trial_loop needs for one trial."""

    world: WorldState
    pipeline: PerceptionPipeline
    planner: object
    task: TrialTask
    loop_mode: str  # open | closed
    supervisor: ScriptedSupervisor | object | None = None
    calib: HandEyeCalibration | None = None
    motion: MotionConfig = field(default_factory=MotionConfig)
    prompt_policy: PromptPolicy = field(default_factory=PromptPolicy)
    trial_index: int = 0
    seed: int = 0
    step_ceiling: int = DEFAULT_STEP_CEILING
    observer: TrialObserver | None = None

    def __post_init__(self):
        if self.loop_mode not in ("open", "closed"):
            raise ValueError(f"unknown loop mode {self.loop_mode!r}")
        if self.loop_mode == "closed" and self.supervisor is None:
            raise ValueError("closed loop requires a supervisor")
        if self.calib is None:
            self.calib = HandEyeCalibration(self.world.camera_pose)


def run_trial_loop(setup: TrialSetup) -> TrialRecord:
    world = setup.world
    task = setup.task
    closed = setup.loop_mode == "closed"
    parsed = parse_task(task.command)

    state = ProtocolState()
    store = TwinStore()
    robot = RobotState(tool_tip_pose=Pose6(np.array([1.0, 0.0, 0.0, 0.0]),
                                           START_TOOLTIP))
    camera_from_world = world.camera_pose.inverse()

    prompts_rng = substream(setup.seed, PROMPTS)
    seg_rng = substream(setup.seed, SEGCORRUPT)
    pose_rng = substream(setup.seed, POSE_NOISE)
    exec_rng = substream(setup.seed, EXEC)

    history: list[HistoryEntry] = []
    trace: list[str] = []
    clock = 0
    planning_steps = 0
    pending_pick_id: int | None = None
    scene_text = serialize_scene(store)
    last_obs_missing: str | None = None
    frame_count = 0
    fault: tuple[str, str] | None = None  # (kind, reason)
    final_outcome: str | None = None

    def emit(kind: str, **fields) -> None:
        nonlocal clock
        clock += 1
        trace.append(json.dumps({"t": clock, "kind": kind, **fields},
                                sort_keys=True))
        if setup.observer is not None:
            setup.observer.on_trace(trace[-1])

    def tooltip_cam() -> tuple:
        return tuple(camera_from_world.apply(robot.tool_tip_pose.trans))

    def ask(kind: str, outcome: str, mode: str | None = None,
            question: str | None = None) -> Feedback | None:
        target = (tuple(true_reach_target(world, task, mode))
                  if mode else None)
        return setup.supervisor.feedback(FeedbackRequest(
            kind=kind, outcome=outcome, tooltip_cam=tooltip_cam(),
            true_target_cam=target,
            budget_remaining=state.adjust_budget_remaining,
            phase=state.phase, question=question))

    while True:
        if planning_steps >= setup.step_ceiling:
            fault = ("ceiling", f"step ceiling {setup.step_ceiling} reached")
            break
        ctx = PlannerContext(task_command=task.command, scene=scene_text,
                             history=tuple(history),
                             available_actions=ACTION_CATALOG_V1,
                             loop_mode=setup.loop_mode)
        try:
            action: Action = setup.planner.next_action(ctx, state)
        except PlannerGiveUp as giveup:
            fault = ("planner-failure", giveup.reason)
            emit("planner-giveup", reason=giveup.reason)
            break
        planning_steps += 1

        reason = validate_action(state, action, store.scene())
        if reason is not None:
            fault = ("violation", reason)
            emit("violation", action=action_to_payload(action),
                 reason=reason)
            break

        feedback: Feedback | None = None
        asked = False
        if isinstance(action, GetObservations):
            frame_count += 1
            frame = render_frame(
                world,
                render_seed=np.random.SeedSequence(
                    [setup.seed, RENDER, frame_count]),
                dropout_seed=np.random.SeedSequence(
                    [setup.seed, DROPOUT, frame_count]),
                frame_id=frame_count)
            prompts = generate_prompts(world, setup.prompt_policy,
                                       prompts_rng)
            scene = perceive(frame, prompts, setup.pipeline, store,
                             world=world, seg_rng=seg_rng,
                             pose_rng=pose_rng)
            scene_text = serialize_scene(store)
            if parsed is not None:
                _, _, last_obs_missing = resolve_targets(parsed, scene.twins)
            outcome = "observed"
            state = advance_state(state, action, outcome)
            if setup.observer is not None:
                setup.observer.on_snapshot(frame, scene, tooltip_cam())
        elif isinstance(action, ReachTarget):
            twin = next(t for t in store.scene().twins
                        if t.object_id == action.object_id)
            res = two_stage_reach(robot, reach_pose(twin, action.mode),
                                  setup.calib, setup.motion, world,
                                  exec_rng)
            robot, world = res.state, res.world
            outcome = "reached"
            state = advance_state(state, action, outcome)
            if action.mode == "pick":
                pending_pick_id = action.object_id
            if setup.observer is not None:
                setup.observer.on_tooltip(tooltip_cam())
            if closed:
                feedback, asked = ask("reach", outcome,
                                      mode=action.mode), True
        elif isinstance(action, AdjustPosition):
            robot, world = adjust_tooltip(robot, action.direction,
                                          setup.calib, world)
            outcome = "adjusted"
            state = advance_state(state, action, outcome)
            if setup.observer is not None:
                setup.observer.on_tooltip(tooltip_cam())
            if closed:
                mode = "pick" if state.phase == "reachedPick" else "place"
                feedback, asked = ask("reach", outcome, mode=mode), True
        elif isinstance(action, PickTarget):
            robot, world, outcome = set_jaw(robot, "closed", world)
            state = advance_state(state, action, outcome,
                                  target_id=pending_pick_id)
            if closed:
                feedback, asked = ask("pick", outcome), True
        elif isinstance(action, ReleaseObject):
            held_name = robot.held_object
            robot, world, outcome = set_jaw(robot, "open", world)
            state = advance_state(state, action, outcome)
            emit("action", action=action_to_payload(action),
                 outcome=outcome)
            history.append(HistoryEntry(action, outcome, None))
            final_outcome = outcome
            if task.kind == "pegTransfer":
                if outcome != f"seated:{task.target_peg}":
                    fault = ("placement", f"release ended as {outcome}")
            else:
                if not (outcome == "released" and held_name == "gauze"):
                    fault = ("placement", f"release ended as {outcome}")
            break
        elif isinstance(action, Inquiry):
            outcome = "asked"
            if closed:
                feedback, asked = ask("inquiry", outcome,
                                      question=action.question), True
        else:  # pragma: no cover - validate_action already rejects these
            raise RuntimeError(f"unhandled action {action!r}")

        emit("action", action=action_to_payload(action), outcome=outcome)
        if asked and feedback is None:
            history.append(HistoryEntry(action, outcome, None))
            fault = ("supervision", "correction budget exhausted")
            emit("supervision", reason=fault[1])
            break
        if feedback is not None:
            emit("feedback", feedback=feedback_to_payload(feedback))
        history.append(HistoryEntry(action, outcome, feedback))

        if (not closed and isinstance(action, PickTarget)
                and outcome != "grasped"):
            # open loop executes the plan once; a missed grasp is final
            fault = ("grasp", f"open-loop grasp failed: {outcome}")
            break
        if isinstance(feedback, Redo):
            state = consume_redo_budget(state)
            robot, world, rel = set_jaw(robot, "open", world)
            emit("note", text="redo: jaw reopened", outcome=rel)

    success = final_outcome is not None and fault is None
    if not success and fault is None:
        fault = ("loop", "trial ended without release")
    mode = "none" if success else classify_failure(
        last_obs_missing, fault[0] if fault else None)
    emit("result", success=success, failure_mode=mode,
         reason="" if success else fault[1])
    return TrialRecord(
        trial_index=setup.trial_index, seed=setup.seed, task=task.command,
        loop_mode=setup.loop_mode, success=success,
        planning_steps=planning_steps,
        adjustments_used=5 - state.adjust_budget_remaining,
        failure_mode=mode, failure_reason="" if success else fault[1],
        action_trace=tuple(trace))
