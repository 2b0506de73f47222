"""Loopback control API of the client daemon, consumed by the CLI and the
browser dashboard (served as static assets under /ui)."""

from __future__ import annotations

import mimetypes
import re
from pathlib import Path
from typing import Optional

from .client import ClientDaemon
from .httpglue import HttpService, JsonRequestHandler


def make_handler(daemon: ClientDaemon, ui_dir: Optional[Path] = None):
    def status(handler, match, body):
        return daemon.monitor()

    def attach(handler, match, body):
        overrides = {}
        if "checkpoint_interval" in body:
            overrides["checkpoint_interval"] = float(body["checkpoint_interval"])
        if "keep_latest" in body:
            overrides["keep_latest"] = int(body["keep_latest"])
        session = daemon.attach_project(body["project_url"],
                                        body["weak_account_key"], **overrides)
        return {"session": session.session_id, "phase": session.phase.value}

    def command(handler, match, body):
        result = daemon.relay_inner(body["command"])
        return {"exit_code": result.exit_code, "stdout": result.stdout}

    def vmcontrol(handler, match, body):
        state = daemon.control_guest(body["action"])
        return {"guest_state": state.value,
                "phase": daemon.session.phase.value if daemon.session else None}

    def snapshot(handler, match, body):
        record = daemon.checkpoint_tick(daemon._require_session())
        return record.meta()

    def restore(handler, match, body):
        daemon.recover_latest()
        return {"phase": daemon.session.phase.value}

    def snapshots(handler, match, body):
        session = daemon.session
        return {"snapshots": [r.meta() for r in session.snapshots] if session else []}

    def settings(handler, match, body):
        daemon.set_settings(
            checkpoint_interval=(float(body["checkpoint_interval"])
                                 if "checkpoint_interval" in body else None),
            keep_latest=(int(body["keep_latest"])
                         if "keep_latest" in body else None))
        session = daemon.session
        return {"checkpoint_interval": session.options.checkpoint_interval,
                "keep_latest": session.options.keep_latest}

    def ui(handler, match, body):
        if ui_dir is None:
            return 404, {"error": "no dashboard assets configured",
                         "error_type": "no_route"}
        rel = match.group(1) or "index.html"
        target = (ui_dir / rel).resolve()
        if not str(target).startswith(str(Path(ui_dir).resolve())) \
                or not target.is_file():
            return 404, {"error": f"no asset {rel}", "error_type": "no_route"}
        ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        return 200, {"Content-Type": ctype}, target.read_bytes()

    class Handler(JsonRequestHandler):
        routes = [
            ("GET", re.compile(r"^/status$"), status),
            ("POST", re.compile(r"^/attach$"), attach),
            ("POST", re.compile(r"^/command$"), command),
            ("POST", re.compile(r"^/vmcontrol$"), vmcontrol),
            ("POST", re.compile(r"^/snapshot$"), snapshot),
            ("POST", re.compile(r"^/restore$"), restore),
            ("GET", re.compile(r"^/snapshots$"), snapshots),
            ("POST", re.compile(r"^/settings$"), settings),
            ("GET", re.compile(r"^/ui/?$"), lambda h, m, b: ui(h, _IndexMatch(), b)),
            ("GET", re.compile(r"^/ui/(.+)$"), ui),
        ]

    class _IndexMatch:
        @staticmethod
        def group(_n):
            return "index.html"

    return Handler


def serve(daemon: ClientDaemon, host: str = "127.0.0.1", port: int = 0,
          ui_dir: Optional[Path] = None) -> HttpService:
    return HttpService(make_handler(daemon, ui_dir), host, port).start()
