"""Step-by-step planners over the six-action vocabulary.

Two interchangeable planners share one calling convention: given the task
command, the serialized scene, the action/feedback history, and the phase
state, emit exactly one next action. `RulePlanner` is the deterministic
reference — a fixed task grammar and the canonical reach/pick/reach/release
plan, interleaving corrections exactly as the last feedback directs.
`LlmPlanner` delegates the same decision to a chat-completion endpoint and
strictly parses the reply; it never invents an action on its own.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import requests

from .protocol import (
    ACTION_CATALOG_V1,
    Action,
    ActionParseError,
    Adjust,
    AdjustPosition,
    Feedback,
    GetObservations,
    Inquiry,
    PickTarget,
    ProtocolState,
    ReachTarget,
    RedetectTarget,
    Redo,
    ReleaseObject,
    action_to_payload,
    feedback_to_payload,
    payload_to_action,
)
from .twinstore import parse_scene_text

# the pegboard grid as seen from the camera: 3 columns x 4 rows, reading
# order top-left to bottom-right (ascending camera y, then ascending x)
PEG_GRID_XS = (-0.03, 0.0, 0.03)
PEG_GRID_YS = (-0.045, -0.015, 0.015, 0.045)


class PlannerGiveUp(Exception):
    """The planner cannot make progress; the trial fails."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class HistoryEntry:
    action: Action
    outcome: str
    feedback: Feedback | None = None


@dataclass(frozen=True)
class PlannerContext:
    """Everything a planner may condition on for one step."""

    task_command: str
    scene: str  # serialized scene representation
    history: tuple[HistoryEntry, ...] = ()
    available_actions: str = ACTION_CATALOG_V1
    loop_mode: str = "closed"  # open | closed

    def __post_init__(self):
        if self.loop_mode not in ("open", "closed"):
            raise ValueError(f"unknown loop mode {self.loop_mode!r}")


def peg_reading_index(position) -> int:
    """Reading-order peg number (1..12) from a camera-frame position.

    Rows and columns snap to the nearest grid line, so millimeter-scale
    pose error and moderate board tilt cannot renumber a peg.
    """
    x, y = float(position[0]), float(position[1])
    col = min(range(3), key=lambda i: abs(PEG_GRID_XS[i] - x))
    row = min(range(4), key=lambda i: abs(PEG_GRID_YS[i] - y))
    return row * 3 + col + 1


_TASK_PEG = re.compile(r"^move block (\w+) to peg (\d{1,2})$")
_TASK_GAUZE = re.compile(r"^pick up the gauze$")


@dataclass(frozen=True)
class ParsedTask:
    kind: str  # pegTransfer | gauzeRetrieval
    block_color: str | None = None
    target_peg_index: int | None = None


def parse_task(command: str) -> ParsedTask | None:
    text = command.strip().lower()
    m = _TASK_PEG.match(text)
    if m:
        index = int(m.group(2))
        if not 1 <= index <= 12:
            return None
        return ParsedTask("pegTransfer", block_color=m.group(1),
                          target_peg_index=index)
    if _TASK_GAUZE.match(text):
        return ParsedTask("gauzeRetrieval")
    return None


class RulePlanner:
    """Deterministic reference planner for the fixed task grammar."""

    name = "rule"

    def next_action(self, ctx: PlannerContext,
                    state: ProtocolState) -> Action:
        task = parse_task(ctx.task_command)
        if task is None:
            return Inquiry("I cannot parse the task command: "
                           f"{ctx.task_command!r}")
        if state.phase == "idle":
            return GetObservations()
        if state.phase == "done":
            raise PlannerGiveUp("trial already complete")

        last = ctx.history[-1] if ctx.history else None
        feedback = last.feedback if last else None
        if isinstance(feedback, Adjust):
            return AdjustPosition(feedback.direction)
        if isinstance(feedback, (Redo, RedetectTarget)):
            return GetObservations()

        twins = parse_scene_text(ctx.scene).twins
        pick_id, place_id, missing = resolve_targets(task, twins)
        if missing:
            trailing = 0
            for entry in reversed(ctx.history):
                if not isinstance(entry.action, GetObservations):
                    break
                trailing += 1
            if trailing >= 2:
                raise PlannerGiveUp(f"required object not visible: {missing}")
            return GetObservations()

        if state.phase == "observed":
            return ReachTarget(pick_id, "pick")
        if state.phase == "reachedPick":
            return PickTarget()
        if state.phase == "holding":
            if task.kind == "gauzeRetrieval":
                return ReleaseObject()
            return ReachTarget(place_id, "place")
        if state.phase == "reachedPlace":
            return ReleaseObject()
        raise PlannerGiveUp(f"no action available in phase {state.phase}")



def resolve_targets(task: ParsedTask, twins) -> tuple[int | None, int | None,
                                                      str | None]:
    """Resolve (pick twin id, place twin id, what's missing) from twins.

    Ties (several matching twins) break to the lowest twin id. The same
    resolution is used by the rule planner to act and by the trial runner
    to decide whether a required object was visible when it mattered.
    """
    if task.kind == "gauzeRetrieval":
        gauze = [t for t in twins if t.detected and t.label == "gauze"]
        if not gauze:
            return None, None, "the gauze"
        return min(g.object_id for g in gauze), None, None
    blocks = [t for t in twins if t.detected and t.label == "block"
              and t.color == task.block_color]
    if not blocks:
        return None, None, f"the {task.block_color} block"
    pick_id = min(b.object_id for b in blocks)
    pegs = [t for t in twins if t.detected and t.label == "peg"
            and peg_reading_index(t.pose.trans) == task.target_peg_index]
    if not pegs:
        return pick_id, None, f"peg {task.target_peg_index}"
    return pick_id, min(p.object_id for p in pegs), None


# ---------------------------------------------------------------------------
# language-model planner


_SYSTEM_ROLE = """\
You are the planning agent for a robot-assisted pick-and-place benchtop.
You see the scene only through the digital-twin text the user provides.
Plan one step at a time; after reach and pick actions the supervisor may
direct corrections, which you must follow exactly. Reply with exactly one
JSON object of the form {"action": <name>, "arguments": {...},
"rationale": <short text>} and nothing else.
"""


@dataclass(frozen=True)
class LlmEndpoint:
    """Where and how to reach the chat-completion service."""

    url: str
    model: str
    token: str | None = None
    timeout: float = 30.0

    @classmethod
    def from_env(cls) -> "LlmEndpoint":
        url = os.environ.get("TWINBENCH_LLM_ENDPOINT")
        if not url:
            raise ValueError("TWINBENCH_LLM_ENDPOINT is not set")
        return cls(url=url,
                   model=os.environ.get("TWINBENCH_LLM_MODEL", "planner"),
                   token=os.environ.get("TWINBENCH_LLM_TOKEN"))


@dataclass
class LlmPlanner:
    """Chat-completion-backed planner speaking the same step contract."""

    endpoint: LlmEndpoint
    max_parse_retries: int = 2
    name: str = field(default="llm", init=False)

    def next_action(self, ctx: PlannerContext,
                    state: ProtocolState) -> Action:
        messages = self.build_messages(ctx, state)
        for _ in range(self.max_parse_retries + 1):
            content = self._complete(messages)
            try:
                return parse_action_response(content)
            except ActionParseError as err:
                messages = messages + [
                    {"role": "assistant", "content": content},
                    {"role": "user", "content":
                        f"Your response could not be parsed: {err}. "
                        "Reply with exactly one action document."},
                ]
        raise PlannerGiveUp(
            f"planner returned {self.max_parse_retries + 1} consecutive"
            " malformed responses")

    @staticmethod
    def build_messages(ctx: PlannerContext, state: ProtocolState) -> list:
        history_lines = []
        for i, entry in enumerate(ctx.history, start=1):
            fb = (json.dumps(feedback_to_payload(entry.feedback),
                             sort_keys=True)
                  if entry.feedback is not None else "-")
            history_lines.append(
                f"{i}. action={json.dumps(action_to_payload(entry.action), sort_keys=True)}"
                f" outcome={entry.outcome} feedback={fb}")
        last_feedback = next(
            (e.feedback for e in reversed(ctx.history)
             if e.feedback is not None), None)
        user = "\n".join([
            f"task: {ctx.task_command}",
            f"loop mode: {ctx.loop_mode}",
            f"phase: {state.phase}",
            f"corrections remaining: {state.adjust_budget_remaining}",
            "scene:",
            ctx.scene.rstrip("\n"),
            "history:",
            "\n".join(history_lines) if history_lines else "(none)",
            "latest feedback: " + (
                json.dumps(feedback_to_payload(last_feedback),
                           sort_keys=True)
                if last_feedback is not None else "(none)"),
        ])
        return [
            {"role": "system",
             "content": _SYSTEM_ROLE + "\n" + ctx.available_actions},
            {"role": "user", "content": user},
        ]

    def _complete(self, messages: list) -> str:
        headers = {"content-type": "application/json"}
        if self.endpoint.token:
            headers["authorization"] = f"Bearer {self.endpoint.token}"
        try:
            resp = requests.post(
                self.endpoint.url,
                json={"model": self.endpoint.model, "messages": messages,
                      "temperature": 0},
                headers=headers, timeout=self.endpoint.timeout)
            resp.raise_for_status()
            body = resp.json()
            return body["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, IndexError,
                ValueError) as err:
            raise PlannerGiveUp(f"planner endpoint failure: {err}") from err


def parse_action_response(content: str) -> Action:
    """Strictly parse one single-action response document."""
    try:
        doc = json.loads(content.strip())
    except json.JSONDecodeError as err:
        raise ActionParseError(f"response is not valid JSON: {err}") \
            from None
    return payload_to_action(doc)


def build_planner(kind: str, endpoint: LlmEndpoint | None = None):
    if kind == "rule":
        return RulePlanner()
    if kind == "llm":
        return LlmPlanner(endpoint or LlmEndpoint.from_env())
    raise ValueError(f"unknown planner kind {kind!r}")
