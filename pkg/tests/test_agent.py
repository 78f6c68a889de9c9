"""Protocol machine, planners, scripted supervisor, and the trial loop."""

import json

import numpy as np
import pytest

from twinbench.geometry import Pose6
from twinbench.llmstub import ScriptedLlmStub, action_response
from twinbench.perception import PerceptionPipeline, CorruptionConfig, PoseNoiseConfig
from twinbench.planner import (
    HistoryEntry,
    LlmEndpoint,
    LlmPlanner,
    PlannerContext,
    PlannerGiveUp,
    RulePlanner,
    parse_task,
    peg_reading_index,
    resolve_targets,
)
from twinbench.protocol import (
    ActionParseError,
    Adjust,
    AdjustPosition,
    Answer,
    Confirm,
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
    payload_to_action,
    payload_to_feedback,
    validate_action,
)
from twinbench.robot import HandEyeCalibration, MotionConfig
from twinbench.scene import EnvironmentConfig, Placement, build_environment, ground_truth
from twinbench.trial import (
    FeedbackRequest,
    ScriptedSupervisor,
    TrialRecord,
    TrialSetup,
    TrialTask,
    classify_failure,
    reading_index_for_peg,
    run_trial_loop,
)
from twinbench.twinstore import ObjectTwin, SceneRepresentation, TwinStore, serialize_scene


def ideal_world(**overrides):
    cfg = EnvironmentConfig(environment="ideal", depth_noise_sigma=0.0,
                            ir_dropout_prob=0.0, **overrides)
    return build_environment(cfg, Placement(
        block_pegs={"block_yellow": "peg_04"}, target_peg="peg_07"))


def scene_with(twins):
    return SceneRepresentation(twins=tuple(twins), frame_id=1)


def twin(object_id, label, xyz, detected=True, color=None):
    return ObjectTwin(object_id=object_id, label=label, model_id=label,
                      pose=Pose6(np.array([1.0, 0, 0, 0]), xyz)
                      if detected else None,
                      detected=detected, stale=not detected, frame_id=1,
                      color=color)


ORACLE_PIPE = PerceptionPipeline(segmenter="oracleFoundation",
                                 pose_estimator="oraclePose")
NO_NOISE = MotionConfig(execution_noise_sigma=0.0)


# ---------------------------------------------------------------------------
# protocol machine


def test_phase_gating():
    idle = ProtocolState()
    assert validate_action(idle, PickTarget()) is not None
    assert validate_action(idle, ReleaseObject()) is not None
    assert validate_action(idle, GetObservations()) is None
    scene = scene_with([twin(1, "block", (0, 0, 0.4))])
    observed = ProtocolState(phase="observed")
    assert validate_action(observed, ReachTarget(1, "pick"), scene) is None
    assert "not in the scene" in validate_action(
        observed, ReachTarget(99, "pick"), scene)
    stale_scene = scene_with([twin(1, "block", (0, 0, 0.4), detected=False)])
    assert "not currently detected" in validate_action(
        observed, ReachTarget(1, "pick"), stale_scene)
    assert validate_action(observed, ReachTarget(1, "place"), scene) \
        is not None  # not holding
    holding = ProtocolState(phase="holding", held_object_id=1)
    assert validate_action(holding, ReachTarget(2, "pick"), scene) is not None
    assert validate_action(holding, ReleaseObject()) is None
    done = ProtocolState(phase="done")
    assert validate_action(done, GetObservations()) is not None


def test_budget_gating_and_validation_purity():
    state = ProtocolState(phase="observed", adjust_budget_remaining=0)
    before = state
    assert "budget" in validate_action(state, AdjustPosition("left"))
    assert state == before
    state = ProtocolState(phase="observed", adjust_budget_remaining=1)
    assert validate_action(state, AdjustPosition("left")) is None
    with pytest.raises(ValueError):
        AdjustPosition("sideways")
    with pytest.raises(ValueError):
        consume_redo_budget(ProtocolState(adjust_budget_remaining=0))


def test_state_invariants():
    with pytest.raises(ValueError):
        ProtocolState(phase="holding")  # holding without an object
    with pytest.raises(ValueError):
        ProtocolState(phase="observed", held_object_id=3)
    with pytest.raises(ValueError):
        ProtocolState(adjust_budget_remaining=6)


def test_canonical_phase_walk():
    s = ProtocolState()
    s = advance_state(s, GetObservations(), "observed")
    assert s.phase == "observed"
    s = advance_state(s, ReachTarget(1, "pick"), "reached")
    assert s.phase == "reachedPick"
    s = advance_state(s, PickTarget(), "grasped", target_id=1)
    assert s.phase == "holding" and s.held_object_id == 1
    s = advance_state(s, ReachTarget(6, "place"), "reached")
    assert s.phase == "reachedPlace"
    s = advance_state(s, ReleaseObject(), "seated:peg_07")
    assert s.phase == "done" and s.held_object_id is None

    missed = advance_state(ProtocolState(phase="reachedPick"),
                           PickTarget(), "grasp_missed")
    assert missed.phase == "observed"  # a fresh reach is required to retry
    dropped = advance_state(
        ProtocolState(phase="reachedPlace", held_object_id=1),
        ReleaseObject(), "dropped")
    assert dropped.phase == "observed" and dropped.held_object_id is None


def test_action_payload_round_trip():
    actions = [GetObservations(), ReachTarget(3, "pick"),
               ReachTarget(7, "place"), PickTarget(), ReleaseObject(),
               AdjustPosition("back"), Inquiry("where is the block?")]
    for action in actions:
        assert payload_to_action(action_to_payload(action)) == action
    feedbacks = [Confirm(), Adjust("up"), Redo(), Answer("look left")]
    for fb in feedbacks:
        assert payload_to_feedback(feedback_to_payload(fb)) == fb
    for bad in [{"action": "fly"}, {"action": "reach_target",
                                    "arguments": {}},
                {"action": "adjust_position",
                 "arguments": {"direction": "diagonal"}}, "not a dict"]:
        with pytest.raises(ActionParseError):
            payload_to_action(bad)


# ---------------------------------------------------------------------------
# peg numbering


def test_reading_order_agrees_with_camera_positions():
    # name-derived numbering and perceived-position numbering must agree
    # for every peg, upright and tilted
    for env, tilt in (("ideal", 0.0), ("tiltedPegboard", 15.0)):
        world = build_environment(EnvironmentConfig(
            environment=env, tilt_degrees=tilt, depth_noise_sigma=0.0,
            ir_dropout_prob=0.0),
            Placement(block_pegs={"block_yellow": "peg_04"},
                      target_peg="peg_07"))
        seen = set()
        for peg in world.pegs():
            cam = ground_truth(world, peg.name).pose.trans
            idx = peg_reading_index(cam)
            assert idx == reading_index_for_peg(peg.name)
            seen.add(idx)
        assert seen == set(range(1, 13))


def test_reading_order_is_reading_order():
    # peg 1 is top-left in the image, peg 12 bottom-right
    assert reading_index_for_peg("peg_09") == 1
    assert reading_index_for_peg("peg_11") == 3
    assert reading_index_for_peg("peg_07") == 5
    assert reading_index_for_peg("peg_00") == 10
    assert reading_index_for_peg("peg_02") == 12


# ---------------------------------------------------------------------------
# rule planner


def make_ctx(task, twins, history=(), loop_mode="closed"):
    store = TwinStore()
    if twins:
        store.update(scene_with(twins))
    return PlannerContext(task_command=task, scene=serialize_scene(store),
                          history=tuple(history), loop_mode=loop_mode)


FULL_SCENE = [
    twin(1, "block", (0.0, 0.015, 0.4375), color="yellow"),
    twin(2, "peg", (0.0, -0.015, 0.4375)),   # reading index 5 -> peg_07
    twin(3, "peg", (0.03, 0.045, 0.4375)),   # reading index 12
]


def test_rule_planner_canonical_sequence():
    planner = RulePlanner()
    task = "move block yellow to peg 5"
    assert planner.next_action(make_ctx(task, []), ProtocolState()) \
        == GetObservations()
    ctx = make_ctx(task, FULL_SCENE)
    assert planner.next_action(ctx, ProtocolState(phase="observed")) \
        == ReachTarget(1, "pick")
    assert planner.next_action(ctx, ProtocolState(phase="reachedPick")) \
        == PickTarget()
    assert planner.next_action(
        ctx, ProtocolState(phase="holding", held_object_id=1)) \
        == ReachTarget(2, "place")
    assert planner.next_action(
        ctx, ProtocolState(phase="reachedPlace", held_object_id=1)) \
        == ReleaseObject()


def test_rule_planner_echoes_feedback():
    planner = RulePlanner()
    task = "move block yellow to peg 5"
    hist = [HistoryEntry(ReachTarget(1, "pick"), "reached", Adjust("left"))]
    assert planner.next_action(
        make_ctx(task, FULL_SCENE, hist),
        ProtocolState(phase="reachedPick")) == AdjustPosition("left")
    hist = [HistoryEntry(PickTarget(), "grasp_missed", Redo())]
    assert planner.next_action(
        make_ctx(task, FULL_SCENE, hist),
        ProtocolState(phase="observed")) == GetObservations()


def test_rule_planner_unparseable_task_asks():
    action = RulePlanner().next_action(make_ctx("do a barrel roll", []),
                                       ProtocolState())
    assert isinstance(action, Inquiry)
    assert "barrel roll" in action.question


def test_rule_planner_gives_up_after_two_reobservations():
    planner = RulePlanner()
    task = "move block red to peg 5"  # no red block in the scene
    ctx = make_ctx(task, FULL_SCENE)
    state = ProtocolState(phase="observed")
    first = planner.next_action(ctx, state)
    assert first == GetObservations()
    hist = [HistoryEntry(GetObservations(), "observed", None)]
    assert planner.next_action(make_ctx(task, FULL_SCENE, hist), state) \
        == GetObservations()
    hist.append(HistoryEntry(GetObservations(), "observed", None))
    with pytest.raises(PlannerGiveUp, match="red block"):
        planner.next_action(make_ctx(task, FULL_SCENE, hist), state)


def test_rule_planner_is_pure():
    planner = RulePlanner()
    ctx = make_ctx("move block yellow to peg 5", FULL_SCENE)
    state = ProtocolState(phase="observed")
    actions = {planner.next_action(ctx, state) for _ in range(10)}
    assert actions == {ReachTarget(1, "pick")}


def test_task_grammar():
    assert parse_task("move block yellow to peg 5").target_peg_index == 5
    assert parse_task("Move Block RED to Peg 12").block_color == "red"
    assert parse_task("pick up the gauze").kind == "gauzeRetrieval"
    assert parse_task("move block yellow to peg 13") is None
    assert parse_task("move block yellow to peg 0") is None
    assert parse_task("put the block wherever") is None


def test_resolve_targets_missing_peg():
    task = parse_task("move block yellow to peg 1")
    pick_id, place_id, missing = resolve_targets(task, FULL_SCENE)
    assert pick_id == 1 and place_id is None and missing == "peg 1"
    task5 = parse_task("move block yellow to peg 5")
    assert resolve_targets(task5, FULL_SCENE) == (1, 2, None)


# ---------------------------------------------------------------------------
# scripted supervisor


def req(error_mm, budget=5, outcome="reached", kind="reach"):
    target = (0.0, 0.0, 0.4)
    tooltip = tuple(np.array(target) - np.array(error_mm) / 1000.0)
    return FeedbackRequest(kind=kind, outcome=outcome, tooltip_cam=tooltip,
                           true_target_cam=target, budget_remaining=budget,
                           phase="reachedPick")


def test_supervisor_worked_examples():
    sup = ScriptedSupervisor()
    assert sup.feedback(req((4.0, -1.0, 0.0))) == Adjust("right")
    assert sup.feedback(req((1.0, 1.0, 1.0))) == Confirm()
    assert sup.feedback(req((-4.0, 0.0, 0.0))) == Adjust("left")
    assert sup.feedback(req((0.0, 4.0, 0.0))) == Adjust("down")
    assert sup.feedback(req((0.0, -4.0, 0.0))) == Adjust("up")
    assert sup.feedback(req((0.0, 0.0, 4.0))) == Adjust("forward")
    assert sup.feedback(req((0.0, 0.0, -4.0))) == Adjust("back")
    assert sup.feedback(req((4.0, 0.0, 0.0), budget=0)) is None
    assert sup.feedback(req((0, 0, 0), kind="pick", outcome="grasped")) \
        == Confirm()
    assert sup.feedback(req((0, 0, 0), kind="pick",
                            outcome="grasp_missed")) == Redo()
    assert sup.feedback(req((0, 0, 0), kind="pick", outcome="grasp_missed",
                            budget=0)) is None


def simulate_reach_correction(error):
    """Pure supervisor-kinematics loop: apply directed 3 mm steps."""
    sup = ScriptedSupervisor()
    tooltip = np.array([0.0, 0.0, 0.4]) - np.asarray(error, float)
    steps = 0
    axis_of = {"right": (0, +1), "left": (0, -1), "down": (1, +1),
               "up": (1, -1), "forward": (2, +1), "back": (2, -1)}
    while steps <= 5:
        fb = sup.feedback(FeedbackRequest(
            kind="reach", outcome="reached", tooltip_cam=tuple(tooltip),
            true_target_cam=(0.0, 0.0, 0.4), budget_remaining=5 - steps,
            phase="reachedPick"))
        if fb == Confirm():
            return steps
        if fb is None:
            return None
        axis, sign = axis_of[fb.direction]
        tooltip[axis] += sign * 0.003
        steps += 1
    return None


def test_supervisor_converges_in_componentwise_steps():
    assert simulate_reach_correction((0.006, 0.003, 0.0)) == 3
    assert simulate_reach_correction((0.001, 0.0, 0.0)) == 0
    # property: whenever the componentwise required steps fit the budget,
    # the reach terminates in Confirm
    rng = np.random.default_rng(77)
    checked = 0
    while checked < 200:
        e = rng.uniform(-0.009, 0.009, 3)
        needed = sum(int(round(abs(c) / 0.003)) for c in e)
        if needed > 5:
            continue
        checked += 1
        steps = simulate_reach_correction(e)
        assert steps is not None and steps <= 5


def test_classification_precedence():
    assert classify_failure("the black block", "ceiling") == "De"
    assert classify_failure(None, "violation") == "Pl"
    assert classify_failure(None, "planner-failure") == "Pl"
    assert classify_failure(None, "ceiling") == "Pl"
    assert classify_failure(None, "grasp") == "Po"
    assert classify_failure(None, "supervision") == "Po"
    assert classify_failure(None, "placement") == "Po"


# ---------------------------------------------------------------------------
# trial loop integration


def run_ideal(loop_mode, pipeline=None, calib_error=None, seed=11,
              supervisor=None, planner=None, task=None, world=None,
              motion=None):
    world = world or ideal_world()
    calib = HandEyeCalibration(
        world.camera_pose,
        error=calib_error or Pose6.identity())
    return run_trial_loop(TrialSetup(
        world=world, pipeline=pipeline or PerceptionPipeline(),
        planner=planner or RulePlanner(),
        task=task or TrialTask.peg_transfer("yellow", "peg_07"),
        loop_mode=loop_mode,
        supervisor=supervisor or ScriptedSupervisor(),
        calib=calib, motion=motion or MotionConfig(), seed=seed))


def test_ideal_trial_succeeds_in_five_steps_both_loops():
    for loop_mode in ("open", "closed"):
        rec = run_ideal(loop_mode)
        assert rec.success and rec.failure_mode == "none"
        assert rec.planning_steps == 5
        assert rec.adjustments_used == 0


def test_trial_records_are_reproducible():
    a = run_ideal("closed", seed=21)
    b = run_ideal("closed", seed=21)
    assert a.to_json() == b.to_json()
    assert TrialRecord.from_json(a.to_json()) == a


def test_calibration_bias_open_fails_closed_recovers():
    bias = Pose6(np.array([1.0, 0, 0, 0]), (0.0045, 0.0, 0.0))
    rec_open = run_ideal("open", calib_error=bias, motion=NO_NOISE)
    assert not rec_open.success and rec_open.failure_mode == "Po"
    assert "grasp" in rec_open.failure_reason
    rec_closed = run_ideal("closed", calib_error=bias, motion=NO_NOISE)
    assert rec_closed.success
    assert rec_closed.adjustments_used >= 2  # pick and place both corrected
    assert rec_closed.planning_steps == 5 + rec_closed.adjustments_used


def test_budget_exhaustion_is_pose_failure():
    bias = Pose6(np.array([1.0, 0, 0, 0]), (0.0075, 0.0075, 0.0))
    rec = run_ideal("closed", calib_error=bias, motion=NO_NOISE)
    assert not rec.success and rec.failure_mode == "Po"
    assert rec.adjustments_used == 5
    assert "budget" in rec.failure_reason


def test_undetected_required_object_is_detection_failure():
    cfg = EnvironmentConfig(environment="blackRedBlock",
                            block_colors=("black", "red"))
    world = build_environment(cfg, Placement(
        block_pegs={"block_black": "peg_04", "block_red": "peg_02"},
        target_peg="peg_07"))
    rec = run_trial_loop(TrialSetup(
        world=world, pipeline=PerceptionPipeline(), planner=RulePlanner(),
        task=TrialTask.peg_transfer("black", "peg_07"), loop_mode="open",
        seed=3))
    assert not rec.success and rec.failure_mode == "De"
    assert "black block" in rec.failure_reason


def test_unparseable_task_hits_ceiling_as_planning_failure():
    rec = run_ideal("closed", task=TrialTask(
        kind="gauzeRetrieval", command="sort the instruments"))
    assert not rec.success and rec.failure_mode == "Pl"
    assert rec.planning_steps == 30


def test_redo_cycle_costs_three_steps_and_budget():
    # a supervisor tolerance above the grasp radius lets a confirmed reach
    # still miss the grasp, driving the redo path deterministically
    loose = ScriptedSupervisor(tolerance=0.0065)
    bias = Pose6(np.array([1.0, 0, 0, 0]), (0.006, 0.0, 0.0))
    rec = run_ideal("closed", calib_error=bias, supervisor=loose,
                    motion=NO_NOISE)
    assert not rec.success and rec.failure_mode == "Po"
    assert rec.adjustments_used == 5  # five redos consumed the budget
    # 1 observe + 6 x (reach + pick) + 5 redo re-observations
    assert rec.planning_steps == 1 + 6 * 2 + 5
    redo_count = sum("redo" in line and '"feedback"' in line
                     for line in rec.action_trace)
    assert redo_count == 5


def test_gauze_task_succeeds():
    cfg = EnvironmentConfig(environment="gauze", depth_noise_sigma=0.0,
                            ir_dropout_prob=0.0)
    world = build_environment(cfg)
    rec = run_trial_loop(TrialSetup(
        world=world, pipeline=ORACLE_PIPE, planner=RulePlanner(),
        task=TrialTask.gauze_retrieval(), loop_mode="closed",
        supervisor=ScriptedSupervisor(), seed=5))
    assert rec.success and rec.planning_steps == 4


# ---------------------------------------------------------------------------
# language-model planner


def llm_planner(stub):
    return LlmPlanner(LlmEndpoint(url=stub.url, model="stub"))


def test_llm_stub_matches_rule_planner_trial():
    world = ideal_world()
    # twin ids are assigned in (label, position) order; find the target peg
    rule_rec = run_ideal("open", pipeline=ORACLE_PIPE, world=world)
    assert rule_rec.success
    reach_lines = [json.loads(line) for line in rule_rec.action_trace
                   if json.loads(line).get("kind") == "action"
                   and json.loads(line)["action"]["action"] == "reach_target"]
    script = [
        action_response("get_observations"),
        action_response("reach_target",
                        reach_lines[0]["action"]["arguments"]),
        action_response("pick_target"),
        action_response("reach_target",
                        reach_lines[1]["action"]["arguments"]),
        action_response("release_object"),
    ]
    with ScriptedLlmStub(script) as stub:
        llm_rec = run_ideal("open", pipeline=ORACLE_PIPE, world=world,
                            planner=llm_planner(stub))
    assert llm_rec.success
    assert llm_rec.planning_steps == rule_rec.planning_steps == 5
    assert [json.loads(l)["action"] for l in llm_rec.action_trace
            if json.loads(l).get("kind") == "action"] \
        == [json.loads(l)["action"] for l in rule_rec.action_trace
            if json.loads(l).get("kind") == "action"]


def test_llm_retry_carries_parse_error_text():
    script = ["this is not json", action_response("get_observations")]
    with ScriptedLlmStub(script) as stub:
        planner = llm_planner(stub)
        ctx = PlannerContext(task_command="move block yellow to peg 5",
                             scene="scene frame=0 objects=0\n")
        action = planner.next_action(ctx, ProtocolState())
        assert action == GetObservations()
        retry_messages = stub.requests[1]["messages"]
    assert "could not be parsed" in retry_messages[-1]["content"]
    assert "not valid JSON" in retry_messages[-1]["content"]


def test_llm_three_malformed_responses_give_up():
    with ScriptedLlmStub(["nope", "{}", "also nope"]) as stub:
        planner = llm_planner(stub)
        ctx = PlannerContext(task_command="move block yellow to peg 5",
                             scene="scene frame=0 objects=0\n")
        with pytest.raises(PlannerGiveUp, match="malformed"):
            planner.next_action(ctx, ProtocolState())


def test_llm_premature_pick_is_planning_failure():
    with ScriptedLlmStub([action_response("pick_target")] * 2) as stub:
        rec = run_ideal("open", pipeline=ORACLE_PIPE,
                        planner=llm_planner(stub))
    assert not rec.success and rec.failure_mode == "Pl"
    assert "pick requires" in rec.failure_reason


def test_llm_transport_failure_is_planning_failure():
    planner = LlmPlanner(LlmEndpoint(url="http://127.0.0.1:9/nowhere",
                                     model="stub", timeout=0.5))
    rec = run_ideal("open", pipeline=ORACLE_PIPE, planner=planner)
    assert not rec.success and rec.failure_mode == "Pl"
    assert "endpoint failure" in rec.failure_reason
