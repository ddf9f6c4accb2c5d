"""Tiny in-process completion server for wire-conformance tests and offline
demos. Serves canned choices over the OpenAI-compatible shape plus a plain
/score endpoint; can inject failing statuses to exercise retry policies.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional


def completion_body(
    texts: list[str],
    token_logprobs: Optional[list[list[float]]] = None,
    completion_tokens: Optional[int] = None,
) -> dict:
    choices = []
    for i, text in enumerate(texts):
        choice = {"index": i, "text": text}
        if token_logprobs is not None:
            choice["logprobs"] = {"token_logprobs": token_logprobs[i]}
        choices.append(choice)
    body = {"object": "text_completion", "model": "mock", "choices": choices}
    if completion_tokens is not None:
        body["usage"] = {"completion_tokens": completion_tokens}
    return body


@dataclass
class MockLLMServer:
    """Scripted responses are served in order (the last one repeats).
    ``fail_first`` statuses are emitted before any scripted response."""

    responses: list[dict] = field(default_factory=list)
    score_value: float = 0.5
    fail_first: list[int] = field(default_factory=list)
    requests: list[dict] = field(default_factory=list)
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._cursor = 0
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802 (http.server API)
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                with outer._lock:
                    outer.requests.append(payload)
                    outer.paths.append(self.path)
                    if outer.fail_first:
                        status = outer.fail_first.pop(0)
                        self.send_response(status)
                        self.end_headers()
                        return
                    if self.path.endswith("/score"):
                        body = {"score": outer.score_value}
                    elif outer.responses:
                        i = min(outer._cursor, len(outer.responses) - 1)
                        outer._cursor += 1
                        body = outer.responses[i]
                    else:
                        body = completion_body([""], [[0.0]])
                data = json.dumps(body).encode("utf8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1"

    def start(self) -> "MockLLMServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "MockLLMServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
