"""Console service: HTTP surface, event stream, and live feedback loop.

Most tests run a real server (uvicorn on an ephemeral port) so the
blocking hand-off between the trial thread and HTTP handlers is
exercised for real, not simulated.
"""

import base64
import contextlib
import io
import json
import threading
import time

import pytest
import requests
import uvicorn
from fastapi.testclient import TestClient
from PIL import Image

from twinbench.console import (
    ConsoleBridge,
    ConsoleProtocolError,
    ConsoleService,
    TranscriptSupervisor,
    build_app,
    feedback_sequence_from_record,
)
from twinbench.harness import ExperimentConfig, run_single_trial
from twinbench.protocol import Adjust, Confirm
from twinbench.trial import FeedbackRequest, TrialRecord


def interactive_config(**overrides) -> ExperimentConfig:
    doc = {
        "task": "pegTransfer",
        "environment": {"kind": "ideal"},
        "pipeline": {"segmenter": "oracleFoundation",
                     "pose_estimator": "oraclePose"},
        "planner": "rule",
        "loop_mode": "closed",
        "supervisor": "interactive",
        "trials": 1,
        "base_seed": 321,
        "execution_noise_sigma": 0.0,
    }
    doc.update(overrides)
    return ExperimentConfig(**doc)


def wait_for(predicate, timeout=60.0, interval=0.05):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError("condition not met within timeout")


@contextlib.contextmanager
def live_console(config: ExperimentConfig):
    service = ConsoleService(config)
    app = build_app(service)
    server = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=0,
                                           log_level="warning"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    wait_for(lambda: server.started, timeout=15.0)
    port = server.servers[0].sockets[0].getsockname()[1]
    try:
        yield f"http://127.0.0.1:{port}", service
    finally:
        server.should_exit = True
        thread.join(timeout=15.0)


class EventCollector:
    """Background reader for the server-sent event stream."""

    def __init__(self, base_url: str):
        self.events: list[tuple[str, dict]] = []
        self._resp = requests.get(base_url + "/events", stream=True,
                                  timeout=(5, 120))
        self._thread = threading.Thread(target=self._read, daemon=True)
        self._thread.start()

    def _read(self):
        kind = None
        try:
            for raw in self._resp.iter_lines(decode_unicode=True):
                if not raw:
                    continue
                if raw.startswith("event: "):
                    kind = raw[len("event: "):]
                elif raw.startswith("data: ") and kind is not None:
                    self.events.append((kind, json.loads(raw[len("data: "):])))
                    kind = None
        except Exception:
            pass  # stream closed during teardown

    def of_kind(self, kind: str) -> list[dict]:
        return [p for k, p in list(self.events) if k == kind]

    def close(self):
        self._resp.close()


def pending(base_url: str) -> dict:
    return wait_for(lambda: requests.get(base_url + "/status", timeout=5)
                    .json()["pending_request"])


def post_feedback(base_url: str, doc: dict) -> requests.Response:
    return requests.post(base_url + "/feedback", json=doc, timeout=5)


def finished_status(base_url: str) -> dict:
    return wait_for(
        lambda: (lambda s: s if s["state"] == "done" else None)(
            requests.get(base_url + "/status", timeout=5).json()))


def _done_or_next(base_url: str, last: dict, target_records: int):
    status = requests.get(base_url + "/status", timeout=5).json()
    if status["records_done"] >= target_records or status["state"] == "done":
        return "done"
    doc = status["pending_request"]
    if doc is not None and doc["request_id"] != last["request_id"]:
        return doc
    return None


def confirm_until_done(base_url: str, doc: dict,
                       target_records: int = 1) -> None:
    """Confirm every request until the trial records its result."""
    while True:
        post_feedback(base_url, {"kind": "confirm",
                                 "request_id": doc["request_id"]})
        outcome = wait_for(
            lambda last=doc: _done_or_next(base_url, last, target_records))
        if outcome == "done":
            return
        doc = outcome


# ---------------------------------------------------------------------------
# bridge unit tests (no HTTP)


def reach_request(budget: int = 5) -> FeedbackRequest:
    return FeedbackRequest(kind="reach", outcome="reached",
                           tooltip_cam=(0.01, -0.02, 0.43),
                           true_target_cam=(0.01, -0.02, 0.43),
                           budget_remaining=budget, phase="reachedPick")


def test_bridge_handshake_across_threads():
    bridge = ConsoleBridge()
    got = {}

    def trial_side():
        got["answer"] = bridge.await_feedback(reach_request())

    t = threading.Thread(target=trial_side)
    t.start()
    doc = wait_for(bridge.pending_doc, timeout=5.0)
    assert doc["kind"] == "reach"
    assert doc["budget_remaining"] == 5
    assert doc["tooltip_mm"] == [10.0, -20.0, 430.0]  # meters -> mm
    result = bridge.submit("adjust", "left", doc["request_id"])
    t.join(timeout=5.0)
    assert got["answer"] == Adjust("left")
    assert result["applied"] == {"feedback": "adjust",
                                 "arguments": {"direction": "left"}}
    assert bridge.pending_doc() is None


def test_bridge_rejects_submit_with_no_pending_request():
    bridge = ConsoleBridge()
    with pytest.raises(ConsoleProtocolError, match="no pending"):
        bridge.submit("confirm", None, None)


def test_bridge_rejects_stale_request_id():
    bridge = ConsoleBridge()
    t = threading.Thread(target=lambda: bridge.await_feedback(reach_request()))
    t.start()
    doc = wait_for(bridge.pending_doc, timeout=5.0)
    with pytest.raises(ConsoleProtocolError, match="stale"):
        bridge.submit("confirm", None, doc["request_id"] - 1)
    # the request survives a stale attempt and resolves with the right id
    bridge.submit("confirm", None, doc["request_id"])
    t.join(timeout=5.0)


def test_bridge_correction_on_empty_budget_resolves_none_and_raises():
    bridge = ConsoleBridge()
    got = {}

    def trial_side():
        got["answer"] = bridge.await_feedback(reach_request(budget=0))

    t = threading.Thread(target=trial_side)
    t.start()
    wait_for(bridge.pending_doc, timeout=5.0)
    with pytest.raises(ConsoleProtocolError, match="budget"):
        bridge.submit("adjust", "up", None)
    t.join(timeout=5.0)
    assert got["answer"] is None  # the trial sees an unanswerable request


def test_bridge_confirm_allowed_on_empty_budget():
    bridge = ConsoleBridge()
    got = {}

    def trial_side():
        got["answer"] = bridge.await_feedback(reach_request(budget=0))

    t = threading.Thread(target=trial_side)
    t.start()
    wait_for(bridge.pending_doc, timeout=5.0)
    bridge.submit("confirm", None, None)
    t.join(timeout=5.0)
    assert got["answer"] == Confirm()


def test_bridge_sticky_events_replay_to_late_subscribers():
    bridge = ConsoleBridge()
    bridge.publish("frame", {"frame_id": 7}, sticky=True)
    bridge.publish("trace", {"line": "x"})  # not sticky
    q = bridge.subscribe()
    kind, payload = q.get_nowait()
    assert (kind, payload["frame_id"]) == ("frame", 7)
    assert q.empty()


# ---------------------------------------------------------------------------
# HTTP surface without a running trial


def test_endpoints_before_any_observation():
    service = ConsoleService(interactive_config())
    client = TestClient(build_app(service, autostart=False))
    assert client.get("/scene").status_code == 404
    assert client.get("/status").json()["state"] == "idle"
    assert client.post("/feedback", json={"kind": "confirm"}).status_code == 409


def test_feedback_validation_rejects_malformed_documents():
    service = ConsoleService(interactive_config())
    client = TestClient(build_app(service, autostart=False))
    assert client.post("/feedback",
                       json={"kind": "adjust",
                             "direction": "sideways"}).status_code == 422
    assert client.post("/feedback",
                       json={"kind": "adjust"}).status_code == 422
    assert client.post("/feedback",
                       json={"kind": "jump"}).status_code == 422
    assert client.post("/feedback",
                       json={"kind": "confirm",
                             "unknown_field": 1}).status_code == 422


def test_console_requires_interactive_closed_loop_config():
    with pytest.raises(ValueError, match="interactive"):
        ConsoleService(interactive_config(supervisor="scripted"))


# ---------------------------------------------------------------------------
# live server: full interactive trials end to end


def test_interactive_trial_all_confirm_succeeds_in_five_steps():
    with live_console(interactive_config()) as (url, service):
        events = EventCollector(url)
        for expected_kind in ("reach", "pick", "reach"):
            doc = pending(url)
            assert doc["kind"] == expected_kind
            assert doc["budget_remaining"] == 5
            resp = post_feedback(url, {"kind": "confirm",
                                       "request_id": doc["request_id"]})
            assert resp.status_code == 200
        status = finished_status(url)
        record = status["last_result"]
        wait_for(lambda: events.of_kind("result"), timeout=10.0)
        wait_for(lambda: len(events.of_kind("trace")) >=
                 len(record["action_trace"]), timeout=10.0)
        events.close()

    assert record["success"] is True
    assert record["planning_steps"] == 5
    assert record["adjustments_used"] == 0

    # the stream carried frames, twins, requests, trace, and the result
    frames = events.of_kind("frame")
    assert frames and all(f["width"] == 640 for f in frames)
    png = base64.b64decode(frames[0]["png_base64"])
    image = Image.open(io.BytesIO(png))
    assert image.size == (640, 480)
    twins = events.of_kind("twins")
    # 1 block + 11 pegs (the peg under the seated block is fully occluded)
    assert twins and len(twins[0]["twins"]) == 12
    labels = {t["label"] for t in twins[0]["twins"]}
    assert labels == {"block", "peg"}
    requests_seen = events.of_kind("feedback-request")
    assert [r["kind"] for r in requests_seen] == ["reach", "pick", "reach"]
    assert requests_seen[0]["action_just_completed"] == "reached"
    assert requests_seen[1]["action_just_completed"] == "grasped"
    assert all(len(r["tooltip_mm"]) == 3 for r in requests_seen)
    results = events.of_kind("result")
    assert len(results) == 1 and results[0]["record"]["success"] is True
    # trace lines streamed 1:1 with the recorded action trace
    assert [json.loads(t["line"]) for t in events.of_kind("trace")] == \
        [json.loads(line) for line in record["action_trace"]]


def test_scene_endpoint_serves_png_and_twins():
    with live_console(interactive_config()) as (url, service):
        pending(url)  # first reach: a frame has been observed by now
        doc = requests.get(url + "/scene", timeout=5).json()
        image = Image.open(io.BytesIO(base64.b64decode(doc["png_base64"])))
        assert image.size == (doc["width"], doc["height"]) == (640, 480)
        assert len(doc["twins"]) == 12
        detected = [t for t in doc["twins"] if t["detected"]]
        assert detected and all(t["position_mm"] is not None
                                and len(t["position_mm"]) == 3
                                for t in detected)
        assert any(t["outline_px"] for t in detected)
        assert doc["tooltip_px"] is not None
        # finish the trial so teardown is clean
        for _ in range(3):
            d = pending(url)
            post_feedback(url, {"kind": "confirm",
                                "request_id": d["request_id"]})
        finished_status(url)


def test_adjust_moves_tooltip_3mm_and_pushes_snapshot():
    with live_console(interactive_config()) as (url, service):
        events = EventCollector(url)
        first = pending(url)
        frames_before = len(events.of_kind("frame"))
        resp = post_feedback(url, {"kind": "adjust", "direction": "left",
                                   "request_id": first["request_id"]})
        assert resp.status_code == 200
        second = wait_for(
            lambda: (lambda d: d if d and d["request_id"] !=
                     first["request_id"] else None)(
                requests.get(url + "/status", timeout=5)
                .json()["pending_request"]))
        # camera-x decreased by exactly one 3 mm step
        assert second["tooltip_mm"][0] == pytest.approx(
            first["tooltip_mm"][0] - 3.0, abs=1e-6)
        assert second["tooltip_mm"][1:] == pytest.approx(
            first["tooltip_mm"][1:], abs=1e-6)
        assert second["budget_remaining"] == 4
        wait_for(lambda: len(events.of_kind("frame")) > frames_before,
                 timeout=10.0)

        # stale id from the resolved request is rejected (double-click race)
        stale = post_feedback(url, {"kind": "confirm",
                                    "request_id": first["request_id"]})
        assert stale.status_code == 409

        confirm_until_done(url, second)
        record = finished_status(url)["last_result"]
        events.close()
    assert record["success"] is True
    assert record["adjustments_used"] == 1
    assert record["planning_steps"] == 6  # canonical 5 + one adjustment


def test_sixth_correction_rejected_and_trial_fails_po():
    with live_console(interactive_config()) as (url, service):
        doc = pending(url)
        for i in range(5):
            directions = ("left", "right")
            resp = post_feedback(url, {"kind": "adjust",
                                       "direction": directions[i % 2],
                                       "request_id": doc["request_id"]})
            assert resp.status_code == 200
            doc = wait_for(
                lambda last=doc: (lambda d: d if d and d["request_id"] !=
                                  last["request_id"] else None)(
                    requests.get(url + "/status", timeout=5)
                    .json()["pending_request"]))
        assert doc["budget_remaining"] == 0
        resp = post_feedback(url, {"kind": "adjust", "direction": "left",
                                   "request_id": doc["request_id"]})
        assert resp.status_code == 409
        assert "budget" in resp.json()["detail"]
        record = finished_status(url)["last_result"]
    assert record["success"] is False
    assert record["failure_mode"] == "Po"
    assert "budget" in record["failure_reason"]
    assert record["adjustments_used"] == 5


def test_recorded_interactive_session_replays_identically():
    config = interactive_config()
    with live_console(config) as (url, service):
        first = pending(url)
        post_feedback(url, {"kind": "adjust", "direction": "up",
                            "request_id": first["request_id"]})
        doc = wait_for(
            lambda: (lambda d: d if d and d["request_id"] !=
                     first["request_id"] else None)(
                requests.get(url + "/status", timeout=5)
                .json()["pending_request"]))
        confirm_until_done(url, doc)
        interactive = TrialRecord.from_json(
            json.dumps(finished_status(url)["last_result"]))

    replayed = run_single_trial(
        config, 0,
        supervisor=TranscriptSupervisor(
            feedback_sequence_from_record(interactive)))
    assert replayed.to_json() == interactive.to_json()


def test_two_trials_run_sequentially():
    with live_console(interactive_config(trials=2)) as (url, service):
        for trial in range(2):
            wait_for(lambda t=trial: requests.get(url + "/status", timeout=5)
                     .json()["trial_index"] == t)
            for _ in range(3):
                doc = pending(url)
                post_feedback(url, {"kind": "confirm",
                                    "request_id": doc["request_id"]})
            wait_for(lambda t=trial: requests.get(url + "/status", timeout=5)
                     .json()["records_done"] == t + 1)
        status = finished_status(url)
        assert status["records_done"] == 2
        assert len(service.records) == 2
        assert all(r.success for r in service.records)
