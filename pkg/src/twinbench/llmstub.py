"""Scripted chat-completion stub for exercising the planner wire path.

Runs a tiny local HTTP service that answers every POST with the next
scripted response, formatted as a chat-completion document. A script entry
is either a literal response string or a callable taking the parsed
request body (so a stub can react to the conversation, e.g. echo the
latest supervisor feedback). Every received request body is recorded for
assertions.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class ScriptedLlmStub:
    """In-process endpoint replaying a fixed script of responses."""

    def __init__(self, script):
        self._script = list(script)
        self._cursor = 0
        self._lock = threading.Lock()
        self.requests: list[dict] = []
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    # -- lifecycle ----------------------------------------------------------

    def __enter__(self) -> "ScriptedLlmStub":
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802 (http.server naming)
                length = int(self.headers.get("content-length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                status, payload = stub._respond(body)
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("content-type", "application/json")
                self.send_header("content-length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    @property
    def url(self) -> str:
        if self._server is None:
            raise RuntimeError("stub is not running")
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    # -- scripting ----------------------------------------------------------

    def _respond(self, body: dict) -> tuple[int, dict]:
        with self._lock:
            self.requests.append(body)
            if self._cursor >= len(self._script):
                return 500, {"error": "stub script exhausted"}
            entry = self._script[self._cursor]
            self._cursor += 1
        content = entry(body) if callable(entry) else entry
        return 200, {
            "choices": [{"message": {"role": "assistant",
                                     "content": content}}],
        }


def action_response(name: str, arguments: dict | None = None,
                    rationale: str = "scripted") -> str:
    """Format a well-formed single-action response document."""
    return json.dumps({"action": name, "arguments": arguments or {},
                       "rationale": rationale})
