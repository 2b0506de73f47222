"""Small JSON-over-HTTP plumbing shared by the project server and the
daemon's loopback control API (both stdlib http.server based)."""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

from . import errors as E

# exception -> (http status, error_type tag); the client transport reverses this
ERROR_MAP = [
    (E.UnknownKey, 403, "unknown_key"),
    (E.UnknownProject, 404, "unknown_project"),
    (E.UnknownHost, 404, "unknown_host"),
    (E.UnknownUnit, 404, "unknown_unit"),
    (E.UnknownBlob, 404, "unknown_blob"),
    (E.UnknownSnapshot, 404, "unknown_snapshot"),
    (E.NoSnapshot, 404, "no_snapshot"),
    (E.DuplicateResult, 409, "duplicate_result"),
    (E.BadRange, 416, "bad_range"),
    (E.IllegalControl, 409, "illegal_control"),
    (E.GuestNotRunning, 409, "guest_not_running"),
    (E.SnapshotFailed, 409, "snapshot_failed"),
    (ValueError, 400, "bad_request"),
]

TYPE_TO_ERROR = {tag: exc for exc, _code, tag in ERROR_MAP}


def error_response(exc: Exception) -> tuple[int, dict]:
    for klass, code, tag in ERROR_MAP:
        if isinstance(exc, klass):
            return code, {"error": str(exc), "error_type": tag}
    return 500, {"error": str(exc), "error_type": "internal"}


def raise_for_error_doc(doc: dict) -> None:
    """Reconstruct the typed error a JSON error body describes."""
    klass = TYPE_TO_ERROR.get(doc.get("error_type", ""), E.TransportError)
    raise klass(doc.get("error", "server error"))


class JsonRequestHandler(BaseHTTPRequestHandler):
    """Route table driven handler: subclasses set `routes` to a list of
    (method, compiled path regex, fn(handler, match, body) -> response).

    A response is a dict (sent as JSON 200), a (status, dict) pair, or a
    (status, headers, raw bytes) triple for blob serving."""

    routes: list[tuple[str, re.Pattern, Callable]] = []
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet; tests assert on state, not logs
        pass

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        if length == 0:
            return {}
        raw = self.rfile.read(length)
        return json.loads(raw.decode("utf-8")) if raw else {}

    def _send_json(self, status: int, doc: dict) -> None:
        payload = json.dumps(doc).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _send_raw(self, status: int, headers: dict, payload: bytes) -> None:
        self.send_response(status)
        for key, value in headers.items():
            self.send_header(key, value)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(payload)

    def _dispatch(self):
        for method, pattern, fn in self.routes:
            if method != self.command and not (self.command == "HEAD" and method == "GET"):
                continue
            match = pattern.match(self.path)
            if match is None:
                continue
            try:
                body = self._read_body() if self.command in ("POST", "PUT") else {}
                response = fn(self, match, body)
            except BrokenPipeError:
                return
            except Exception as exc:  # mapped onto typed JSON errors
                status, doc = error_response(exc)
                self._send_json(status, doc)
                return
            if isinstance(response, dict):
                self._send_json(200, response)
            elif len(response) == 2:
                self._send_json(response[0], response[1])
            else:
                self._send_raw(*response)
            return
        self._send_json(404, {"error": f"no route for {self.command} {self.path}",
                              "error_type": "no_route"})

    def do_GET(self):
        self._dispatch()

    def do_HEAD(self):
        self._dispatch()

    def do_POST(self):
        self._dispatch()


class HttpService:
    """A ThreadingHTTPServer wrapper with start/stop lifecycle."""

    def __init__(self, handler_class, host: str = "127.0.0.1", port: int = 0):
        self.httpd = ThreadingHTTPServer((host, port), handler_class)
        self.httpd.daemon_threads = True
        self.host, self.port = self.httpd.server_address[:2]
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "HttpService":
        self._thread = threading.Thread(target=self.httpd.serve_forever,
                                        name="http-service", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
