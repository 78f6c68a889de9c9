"""Action vocabulary, supervisor feedback contract, and trial phase machine.

The planner emits exactly one :data:`Action` per step; the harness validates
it against the current :class:`ProtocolState` before execution, so an
ill-formed plan is rejected (and later classified as a planning failure)
instead of moving the arm. Feedback is the supervisor's half of the same
contract. Both sides serialize to small structured payloads used on the
wire (planner endpoint, console service) and in persisted traces.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

DIRECTIONS = ("up", "down", "left", "right", "forward", "back")
PHASES = ("idle", "observed", "reachedPick", "holding", "reachedPlace", "done")
ADJUST_BUDGET = 5


# ---------------------------------------------------------------------------
# actions


@dataclass(frozen=True)
class GetObservations:
    """Request a fresh perception pass; refreshes the scene twins."""


@dataclass(frozen=True)
class ReachTarget:
    """Move the tool tip to an object's grasp (pick) or drop (place) point."""

    object_id: int
    mode: str  # pick | place

    def __post_init__(self):
        if self.mode not in ("pick", "place"):
            raise ValueError(f"unknown reach mode {self.mode!r}")
        if self.object_id < 1:
            raise ValueError("object_id must be a positive twin id")


@dataclass(frozen=True)
class PickTarget:
    """Close the jaw on the most recently reached pick target."""


@dataclass(frozen=True)
class ReleaseObject:
    """Open the jaw, releasing whatever is held."""


@dataclass(frozen=True)
class AdjustPosition:
    """Nudge the tool tip 3 mm along one camera-frame axis."""

    direction: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass(frozen=True)
class Inquiry:
    """Ask the supervisor a free-text question."""

    question: str


Action = (GetObservations | ReachTarget | PickTarget | ReleaseObject
          | AdjustPosition | Inquiry)


# ---------------------------------------------------------------------------
# feedback


@dataclass(frozen=True)
class Confirm:
    """The last action achieved its goal; proceed."""


@dataclass(frozen=True)
class Adjust:
    """Nudge the tool tip one step in the given direction, then re-check."""

    direction: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass(frozen=True)
class Redo:
    """The last pick failed; release, re-observe, and re-execute."""


@dataclass(frozen=True)
class RedetectTarget:
    """The target looks wrong; re-observe before continuing."""


@dataclass(frozen=True)
class Answer:
    """Free-text reply to an Inquiry."""

    text: str


Feedback = Confirm | Adjust | Redo | RedetectTarget | Answer


# ---------------------------------------------------------------------------
# phase machine


@dataclass(frozen=True)
class ProtocolState:
    """Where the trial stands; advanced only by executed, accepted actions."""

    phase: str = "idle"
    held_object_id: int | None = None
    adjust_budget_remaining: int = ADJUST_BUDGET

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        holding = self.phase in ("holding", "reachedPlace")
        if holding != (self.held_object_id is not None):
            raise ValueError("held_object_id must be set exactly in the"
                             " holding and reachedPlace phases")
        if not 0 <= self.adjust_budget_remaining <= ADJUST_BUDGET:
            raise ValueError("adjust budget out of range")


def validate_action(state: ProtocolState, action: Action,
                    scene=None) -> str | None:
    """Check an action against the phase machine; None means accepted.

    A returned string is the violation reason. Validation never mutates
    state. When a scene representation is supplied, ReachTarget must name
    one of its currently detected twins.
    """
    if state.phase == "done":
        return "trial already complete"
    if isinstance(action, (GetObservations, Inquiry)):
        return None
    if isinstance(action, AdjustPosition):
        if state.adjust_budget_remaining <= 0:
            return "adjustment budget exhausted"
        return None
    if isinstance(action, ReachTarget):
        if action.mode == "pick":
            if state.phase not in ("observed", "reachedPick"):
                return f"cannot reach a pick target in phase {state.phase}"
        else:
            if state.phase not in ("holding", "reachedPlace"):
                return "cannot reach a place target while not holding"
        if scene is not None:
            twin = next((t for t in scene.twins
                         if t.object_id == action.object_id), None)
            if twin is None:
                return f"object {action.object_id} is not in the scene"
            if not twin.detected:
                return f"object {action.object_id} is not currently detected"
        return None
    if isinstance(action, PickTarget):
        if state.phase != "reachedPick":
            return "pick requires a completed reach to a pick target"
        return None
    if isinstance(action, ReleaseObject):
        if state.phase not in ("holding", "reachedPlace"):
            return "release requires holding an object"
        return None
    return f"unknown action {type(action).__name__}"


def advance_state(state: ProtocolState, action: Action, outcome: str,
                  target_id: int | None = None) -> ProtocolState:
    """Fold an executed action's outcome into the phase machine.

    `target_id` is the twin the preceding pick reach aimed at; it becomes
    held_object_id when the grasp succeeds.
    """
    if isinstance(action, GetObservations):
        phase = "holding" if state.held_object_id is not None else "observed"
        return replace(state, phase=phase)
    if isinstance(action, ReachTarget):
        phase = "reachedPick" if action.mode == "pick" else "reachedPlace"
        return replace(state, phase=phase)
    if isinstance(action, PickTarget):
        if outcome == "grasped":
            if target_id is None:
                raise ValueError("a successful pick needs its target id")
            return replace(state, phase="holding", held_object_id=target_id)
        return replace(state, phase="observed", held_object_id=None)
    if isinstance(action, ReleaseObject):
        done = outcome.startswith("seated:") or outcome == "released"
        return replace(state, phase="done" if done else "observed",
                       held_object_id=None)
    if isinstance(action, AdjustPosition):
        return replace(
            state,
            adjust_budget_remaining=state.adjust_budget_remaining - 1)
    if isinstance(action, Inquiry):
        return state
    raise ValueError(f"unknown action {type(action).__name__}")


def consume_redo_budget(state: ProtocolState) -> ProtocolState:
    """A Redo shares the 5-correction budget with position adjustments."""
    if state.adjust_budget_remaining <= 0:
        raise ValueError("correction budget already exhausted")
    return replace(state,
                   adjust_budget_remaining=state.adjust_budget_remaining - 1)


# ---------------------------------------------------------------------------
# wire payloads


class ActionParseError(ValueError):
    """A structured action document could not be turned into an Action."""


_ACTION_NAMES = {
    GetObservations: "get_observations",
    ReachTarget: "reach_target",
    PickTarget: "pick_target",
    ReleaseObject: "release_object",
    AdjustPosition: "adjust_position",
    Inquiry: "inquiry",
}

_FEEDBACK_NAMES = {
    Confirm: "confirm",
    Adjust: "adjust",
    Redo: "redo",
    RedetectTarget: "redetect_target",
    Answer: "answer",
}


def action_to_payload(action: Action) -> dict:
    name = _ACTION_NAMES[type(action)]
    args: dict = {}
    if isinstance(action, ReachTarget):
        args = {"object_id": action.object_id, "mode": action.mode}
    elif isinstance(action, AdjustPosition):
        args = {"direction": action.direction}
    elif isinstance(action, Inquiry):
        args = {"question": action.question}
    return {"action": name, "arguments": args}


def payload_to_action(doc: dict) -> Action:
    """Strictly parse one {action, arguments} document."""
    if not isinstance(doc, dict):
        raise ActionParseError("action document must be a JSON object")
    name = doc.get("action")
    args = doc.get("arguments") or {}
    if not isinstance(args, dict):
        raise ActionParseError("arguments must be an object")
    try:
        if name == "get_observations":
            return GetObservations()
        if name == "reach_target":
            return ReachTarget(object_id=int(args["object_id"]),
                               mode=str(args["mode"]))
        if name == "pick_target":
            return PickTarget()
        if name == "release_object":
            return ReleaseObject()
        if name == "adjust_position":
            return AdjustPosition(direction=str(args["direction"]))
        if name == "inquiry":
            return Inquiry(question=str(args["question"]))
    except KeyError as missing:
        raise ActionParseError(
            f"action {name!r} is missing argument {missing}") from None
    except (TypeError, ValueError) as bad:
        raise ActionParseError(f"invalid arguments for {name!r}: {bad}") \
            from None
    raise ActionParseError(f"unknown action name {name!r}")


def feedback_to_payload(feedback: Feedback) -> dict:
    name = _FEEDBACK_NAMES[type(feedback)]
    args: dict = {}
    if isinstance(feedback, Adjust):
        args = {"direction": feedback.direction}
    elif isinstance(feedback, Answer):
        args = {"text": feedback.text}
    return {"feedback": name, "arguments": args}


def payload_to_feedback(doc: dict) -> Feedback:
    if not isinstance(doc, dict):
        raise ActionParseError("feedback document must be a JSON object")
    name = doc.get("feedback")
    args = doc.get("arguments") or {}
    if not isinstance(args, dict):
        raise ActionParseError("arguments must be an object")
    try:
        if name == "confirm":
            return Confirm()
        if name == "adjust":
            return Adjust(direction=str(args["direction"]))
        if name == "redo":
            return Redo()
        if name == "redetect_target":
            return RedetectTarget()
        if name == "answer":
            return Answer(text=str(args["text"]))
    except KeyError as missing:
        raise ActionParseError(
            f"feedback {name!r} is missing argument {missing}") from None
    except (TypeError, ValueError) as bad:
        raise ActionParseError(f"invalid arguments for {name!r}: {bad}") \
            from None
    raise ActionParseError(f"unknown feedback name {name!r}")


ACTION_CATALOG_V1 = """\
action catalog v1

You control a surgical robot arm over a digital-twin scene. Positions in
the scene text are millimeters in the camera frame. Emit exactly one
action per turn as a JSON object {"action": <name>, "arguments": {...},
"rationale": <short text>}.

1. get_observations — arguments {}
   Refresh perception; the updated scene is given back to you.
2. reach_target — arguments {"object_id": <int>, "mode": "pick"|"place"}
   Move the tool tip to the object's grasp point (pick) or to the drop
   point above it (place). Pick requires an empty jaw; place requires a
   held object and a peg target.
3. pick_target — arguments {}
   Close the jaw on the most recently reached pick target. Only valid
   immediately after a pick reach.
4. release_object — arguments {}
   Open the jaw, releasing the held object.
5. adjust_position — arguments {"direction": "up"|"down"|"left"|"right"|
   "forward"|"back"}
   Nudge the tool tip 3 mm along one camera-frame axis. At most 5
   corrections (adjustments or redos) per trial.
6. inquiry — arguments {"question": <text>}
   Ask the supervisor a question.
"""
