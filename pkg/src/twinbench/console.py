"""Interactive supervisor console: an HTTP service around one experiment.

The trial loop runs in a worker thread and blocks whenever it needs
supervisor feedback; a human (or test client) answers over HTTP with the
same feedback documents the scripted supervisor emits, so recorded
sessions replay as scripts bit-for-bit. One trial runs at a time; the
event stream and the feedback endpoint are serialized against the loop.

Wire protocol v1 (see docs/wire-protocol.md): positions cross this
boundary in millimeters, camera frame; color frames as base64 PNG.
Server-side rules mirror the trial loop's own: feedback without a
pending request is a protocol error, a stale request id is rejected
(double-click safety), malformed directions never reach the trial, and
a correction (adjust or redo) posted with an empty budget resolves the
pending request as unanswerable — failing the trial exactly as the
scripted supervisor would.
"""

from __future__ import annotations

import base64
import io
import json
import queue
import threading
from contextlib import asynccontextmanager
from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import HTMLResponse, StreamingResponse
from PIL import Image
from pydantic import BaseModel, ConfigDict

from .geometry import project
from .harness import ExperimentConfig, emit_results, run_single_trial
from .protocol import (
    Adjust,
    Confirm,
    Feedback,
    Redo,
    feedback_to_payload,
    payload_to_feedback,
)
from .trial import FeedbackRequest, TrialObserver, TrialRecord

PROTOCOL_VERSION = 1

_SUBSCRIBER_BUFFER = 512  # events buffered per slow client before it is dropped


class ConsoleProtocolError(Exception):
    """A feedback post that violates the console protocol (HTTP 409)."""


def _mm(point) -> list[float]:
    """Camera-frame meters -> millimeters, rounded for stable payloads."""
    return [round(float(c) * 1000.0, 3) for c in np.asarray(point)]


class ConsoleBridge:
    """Hand-off point between the trial thread and HTTP handlers.

    The trial thread parks in :meth:`await_feedback`; HTTP handlers
    resolve the pending request via :meth:`submit`. Every state change is
    also broadcast to event-stream subscribers, with sticky events
    replayed to late joiners so a freshly opened console shows the
    current frame, twins, and pending request immediately.
    """

    def __init__(self):
        self._cv = threading.Condition()
        self._pending: FeedbackRequest | None = None
        self._pending_id = 0
        self._answer: Feedback | None = None
        self._answered = False
        self._closed = False
        self._subscribers: list[queue.Queue] = []
        self._sticky: dict[str, dict] = {}

    # ---- broadcast ----

    def publish(self, kind: str, payload: dict, sticky: bool = False) -> None:
        with self._cv:
            if sticky:
                self._sticky[kind] = payload
            targets = list(self._subscribers)
        for q in targets:
            try:
                q.put_nowait((kind, payload))
            except queue.Full:
                self.unsubscribe(q)

    def retract(self, kind: str) -> None:
        with self._cv:
            self._sticky.pop(kind, None)

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=_SUBSCRIBER_BUFFER)
        with self._cv:
            for kind, payload in self._sticky.items():
                q.put_nowait((kind, payload))
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._cv:
            if q in self._subscribers:
                self._subscribers.remove(q)

    # ---- trial side ----

    def await_feedback(self, request: FeedbackRequest) -> Feedback | None:
        """Park the trial thread until a client resolves this request."""
        with self._cv:
            if self._closed:
                raise RuntimeError("console service is shut down")
            self._pending_id += 1
            rid = self._pending_id
            self._pending = request
            self._answered = False
            self._answer = None
        self.publish("feedback-request", self._request_doc(rid, request),
                     sticky=True)
        with self._cv:
            while not self._answered:
                if self._closed:
                    self._pending = None
                    raise RuntimeError("console service is shut down")
                self._cv.wait(timeout=0.5)
            answer = self._answer
            self._pending = None
        self.retract("feedback-request")
        return answer

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()
        for q in list(self._subscribers):
            try:
                q.put_nowait(("__close__", {}))
            except queue.Full:
                pass

    # ---- HTTP side ----

    def pending_doc(self) -> dict | None:
        with self._cv:
            # an answered request still waiting for the trial thread to
            # wake is no longer pending from a client's point of view
            if self._pending is None or self._answered:
                return None
            return self._request_doc(self._pending_id, self._pending)

    def submit(self, kind: str, direction: str | None,
               request_id: int | None) -> dict:
        """Resolve the pending request; returns the applied feedback doc.

        Raises ConsoleProtocolError when there is no pending request or
        the given request id is stale. An adjust or redo against an empty
        budget resolves the request as unanswerable (the trial then fails
        the same way it does when the scripted supervisor gives up) and
        is still reported as a protocol error to the caller.
        """
        with self._cv:
            if self._pending is None or self._answered:
                raise ConsoleProtocolError("no pending feedback request")
            if request_id is not None and request_id != self._pending_id:
                raise ConsoleProtocolError(
                    f"stale request id {request_id} "
                    f"(pending is {self._pending_id})")
            budget = self._pending.budget_remaining
            if kind in ("adjust", "redo") and budget <= 0:
                self._answer = None
                self._answered = True
                self._cv.notify_all()
                raise ConsoleProtocolError(
                    "correction budget exhausted; trial fails")
            feedback: Feedback
            if kind == "confirm":
                feedback = Confirm()
            elif kind == "redo":
                feedback = Redo()
            else:
                feedback = Adjust(direction=direction)
            self._answer = feedback
            self._answered = True
            rid = self._pending_id
            self._cv.notify_all()
        return {"v": PROTOCOL_VERSION, "request_id": rid,
                "applied": feedback_to_payload(feedback)}

    @staticmethod
    def _request_doc(rid: int, request: FeedbackRequest) -> dict:
        return {
            "v": PROTOCOL_VERSION,
            "request_id": rid,
            "kind": request.kind,
            "action_just_completed": request.outcome,
            "tooltip_mm": _mm(request.tooltip_cam),
            "budget_remaining": request.budget_remaining,
            "phase": request.phase,
            "question": request.question,
        }


class InteractiveSupervisor:
    """Supervisor whose answers come from console clients over HTTP."""

    name = "interactive"

    def __init__(self, bridge: ConsoleBridge):
        self.bridge = bridge

    def feedback(self, request: FeedbackRequest) -> Feedback | None:
        return self.bridge.await_feedback(request)


class TranscriptSupervisor:
    """Replays a recorded feedback sequence (interchangeability check).

    Feed it the sequence extracted from an interactive session's trace
    and the replayed trial produces the identical record.
    """

    name = "transcript"

    def __init__(self, feedbacks):
        self._feedbacks = list(feedbacks)
        self._next = 0

    def feedback(self, request: FeedbackRequest) -> Feedback | None:
        if self._next >= len(self._feedbacks):
            raise RuntimeError("transcript exhausted: the replayed trial "
                               "asked for more feedback than was recorded")
        fb = self._feedbacks[self._next]
        self._next += 1
        return fb


def feedback_sequence_from_record(record: TrialRecord) -> list:
    """Extract the supervisor's answers from a recorded action trace.

    ``None`` entries mark the points where the supervisor declared the
    situation unrecoverable (budget exhausted), matching the scripted
    supervisor's contract.
    """
    out = []
    for line in record.action_trace:
        doc = json.loads(line)
        if doc["kind"] == "feedback":
            out.append(payload_to_feedback(doc["feedback"]))
        elif doc["kind"] == "supervision":
            out.append(None)
    return out


def _twin_doc(twin) -> dict:
    doc = {
        "id": twin.object_id,
        "label": twin.label,
        "color": twin.color,
        "detected": twin.detected,
        "stale": twin.stale,
        "position_mm": _mm(twin.pose.trans) if twin.pose is not None else None,
        "outline_px": None,
    }
    if twin.mask is not None and twin.mask.any():
        doc["outline_px"] = _mask_outline(twin.mask)
    return doc


def _mask_outline(mask: np.ndarray, stride: int = 4) -> list[list[float]]:
    """Longest contour of a boolean mask as [x, y] pixel pairs."""
    from skimage import measure

    contours = measure.find_contours(mask.astype(float), 0.5)
    if not contours:
        return []
    longest = max(contours, key=len)
    pts = longest[::stride] if len(longest) > stride else longest
    return [[round(float(c), 1), round(float(r), 1)] for r, c in pts]


class ConsoleService(TrialObserver):
    """Runs one interactive experiment and mirrors it onto the bridge."""

    def __init__(self, config: ExperimentConfig):
        if config.loop_mode != "closed" or config.supervisor != "interactive":
            raise ValueError(
                "the console serves closed-loop interactive configs only")
        self.config = config
        self.bridge = ConsoleBridge()
        self.records: list[TrialRecord] = []
        self._lock = threading.Lock()
        self._state = "idle"  # idle | running | done
        self._trial_index = -1
        self._steps = 0
        self._latest_png: bytes | None = None
        self._latest_frame_id = 0
        self._latest_twins: list[dict] = []
        self._latest_tooltip_mm: list[float] | None = None
        self._intrinsics = config.environment.build().intrinsics()
        self._thread: threading.Thread | None = None
        self._stop = False

    # ---- lifecycle ----

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name="console-trials")
        self._thread.start()

    def stop(self) -> None:
        self._stop = True
        self.bridge.close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def _run(self) -> None:
        with self._lock:
            self._state = "running"
        self._publish_status()
        supervisor = InteractiveSupervisor(self.bridge)
        for i in range(self.config.trials):
            if self._stop:
                break
            with self._lock:
                self._trial_index = i
                self._steps = 0
            self._publish_status()
            record = run_single_trial(self.config, i, supervisor=supervisor,
                                      observer=self)
            self.records.append(record)
            self.bridge.publish("result",
                                {"v": PROTOCOL_VERSION,
                                 "record": json.loads(record.to_json())})
            self._publish_status()
        if self.config.output and not self._stop:
            from .harness import ExperimentSummary
            emit_results(ExperimentSummary.from_records(self.records),
                         self.records, self.config.output,
                         label="interactive")
        with self._lock:
            self._state = "done"
        self._publish_status(sticky=True)

    # ---- TrialObserver hooks (called from the trial thread) ----

    def on_snapshot(self, frame, scene, tooltip_cam) -> None:
        buf = io.BytesIO()
        Image.fromarray(frame.color).save(buf, format="PNG")
        twins = [_twin_doc(t) for t in scene.twins]
        with self._lock:
            self._latest_png = buf.getvalue()
            self._latest_frame_id = frame.frame_id
            self._latest_twins = twins
            self._latest_tooltip_mm = _mm(tooltip_cam)
        self._publish_frame()
        self.bridge.publish("twins", {"v": PROTOCOL_VERSION,
                                      "frame_id": frame.frame_id,
                                      "twins": twins}, sticky=True)

    def on_tooltip(self, tooltip_cam) -> None:
        with self._lock:
            self._latest_tooltip_mm = _mm(tooltip_cam)
        self._publish_frame()

    def on_trace(self, line: str) -> None:
        doc = json.loads(line)
        if doc.get("kind") in ("action", "violation"):
            with self._lock:
                self._steps += 1
        self.bridge.publish("trace", {"v": PROTOCOL_VERSION, "line": line})

    # ---- documents ----

    def _tooltip_px(self) -> list[float] | None:
        if self._latest_tooltip_mm is None:
            return None
        cam = np.asarray(self._latest_tooltip_mm) / 1000.0
        if cam[2] <= 0:
            return None
        px = project(cam, self._intrinsics)
        return [round(float(px[0]), 1), round(float(px[1]), 1)]

    def _publish_frame(self) -> None:
        with self._lock:
            if self._latest_png is None:
                return
            payload = {
                "v": PROTOCOL_VERSION,
                "frame_id": self._latest_frame_id,
                "width": self._intrinsics.width,
                "height": self._intrinsics.height,
                "png_base64": base64.b64encode(self._latest_png).decode(),
                "tooltip_mm": self._latest_tooltip_mm,
                "tooltip_px": self._tooltip_px(),
            }
        self.bridge.publish("frame", payload, sticky=True)

    def _publish_status(self, sticky: bool = False) -> None:
        self.bridge.publish("status", self.status_doc(), sticky=sticky)

    def status_doc(self) -> dict:
        pending = self.bridge.pending_doc()
        with self._lock:
            last = self.records[-1] if self.records else None
            return {
                "v": PROTOCOL_VERSION,
                "state": self._state,
                "task": self.config.task,
                "loop_mode": self.config.loop_mode,
                "trials": self.config.trials,
                "trial_index": self._trial_index,
                "records_done": len(self.records),
                "planning_steps": self._steps,
                "pending_request": pending,
                "phase": pending["phase"] if pending else None,
                "last_result": json.loads(last.to_json()) if last else None,
            }

    def scene_doc(self) -> dict | None:
        with self._lock:
            if self._latest_png is None:
                return None
            return {
                "v": PROTOCOL_VERSION,
                "frame_id": self._latest_frame_id,
                "width": self._intrinsics.width,
                "height": self._intrinsics.height,
                "png_base64": base64.b64encode(self._latest_png).decode(),
                "twins": self._latest_twins,
                "tooltip_mm": self._latest_tooltip_mm,
                "tooltip_px": self._tooltip_px(),
            }


class FeedbackBody(BaseModel):
    """POST /feedback payload: exactly the scripted supervisor's vocabulary."""

    model_config = ConfigDict(extra="forbid")

    v: int = PROTOCOL_VERSION
    kind: Literal["confirm", "adjust", "redo"]
    direction: Optional[Literal["up", "down", "left", "right",
                                "forward", "back"]] = None
    request_id: Optional[int] = None


_INDEX_PAGE = """<!doctype html>
<title>supervisor console</title>
<h1>twinbench console</h1>
<p>No UI bundle is mounted. Endpoints:</p>
<ul>
<li>GET /scene &mdash; latest frame (base64 PNG) + twins</li>
<li>GET /status &mdash; trial status</li>
<li>GET /events &mdash; server-sent event stream</li>
<li>POST /feedback &mdash; {"kind": "confirm" | "adjust" | "redo",
 "direction": ..., "request_id": ...}</li>
</ul>
"""


def build_app(service: ConsoleService, ui_dir: str | None = None,
              autostart: bool = True) -> FastAPI:
    """Assemble the HTTP app around a console service.

    With ``autostart`` the experiment thread launches on server startup;
    tests that want manual control pass ``autostart=False`` and call
    ``service.start()`` themselves.
    """
    lifespan = None
    if autostart:
        @asynccontextmanager
        async def lifespan(app):
            service.start()
            yield
            service.stop()

    app = FastAPI(title="twinbench supervisor console", lifespan=lifespan)

    @app.get("/status")
    def status() -> dict:
        return service.status_doc()

    @app.get("/scene")
    def scene() -> dict:
        doc = service.scene_doc()
        if doc is None:
            raise HTTPException(status_code=404,
                                detail="no frame observed yet")
        return doc

    @app.post("/feedback")
    def feedback(body: FeedbackBody) -> dict:
        if body.kind == "adjust" and body.direction is None:
            raise HTTPException(status_code=422,
                                detail="adjust requires a direction")
        try:
            return service.bridge.submit(body.kind, body.direction,
                                         body.request_id)
        except ConsoleProtocolError as err:
            raise HTTPException(status_code=409, detail=str(err)) from None

    @app.get("/events")
    def events() -> StreamingResponse:
        q = service.bridge.subscribe()

        def stream():
            try:
                yield _sse("hello", {"v": PROTOCOL_VERSION,
                                     **service.status_doc()})
                while True:
                    try:
                        kind, payload = q.get(timeout=1.0)
                    except queue.Empty:
                        yield ": keepalive\n\n"
                        continue
                    if kind == "__close__":
                        break
                    yield _sse(kind, payload)
            finally:
                service.bridge.unsubscribe(q)

        return StreamingResponse(stream(), media_type="text/event-stream",
                                 headers={"cache-control": "no-store"})

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    else:
        @app.get("/", response_class=HTMLResponse)
        def index() -> str:
            return _INDEX_PAGE

    return app


def _sse(kind: str, payload: dict) -> str:
    return f"event: {kind}\ndata: {json.dumps(payload, sort_keys=True)}\n\n"


def serve_console(config: ExperimentConfig, bind: str,
                  ui_dir: str | None = None) -> None:
    """Run the console service until interrupted (CLI entry point)."""
    import uvicorn

    host, _, port_text = bind.rpartition(":")
    if not host or not port_text.isdigit():
        raise ValueError(f"bind address {bind!r} is not host:port")
    service = ConsoleService(config)
    app = build_app(service, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=int(port_text), log_level="warning")
