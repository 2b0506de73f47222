"""Launch a throwaway project server plus client daemon for the dashboard
integration test.  Prints one JSON line with the endpoints, then runs until
stdin closes."""

import json
import sys
import tempfile
import time
from pathlib import Path

from vboinc.catalog import seed_project
from vboinc.client import ClientDaemon, ClientOptions
from vboinc.clock import WallClock
from vboinc.controlapi import serve as serve_control
from vboinc.protocol import BackoffPolicy
from vboinc.runtime import GuestSpec, RuntimeConfig
from vboinc.server import ServerCore
from vboinc.serverhttp import serve as serve_server
from vboinc.transport import HttpTransport

URL = "http://projects.example/dashboard"
KEY = "dash-key"

core = ServerCore(WallClock())
seed_project(core, URL, KEY,
             units=[("dash-0", "cpu 100000000\n", time.monotonic() + 86400)],
             image_bytes=64 * 1024, depdisk_logical=1024 * 1024)
server_http = serve_server(core)

options = ClientOptions(
    checkpoint_interval=3600.0, keep_latest=4,
    fresh_disk_bytes=1 << 20, swap_bytes=1 << 17, chunk_bytes=1 << 14,
    retry_budget=3,
    backoff=BackoffPolicy(base=0.05, cap=0.2, jitter_fraction=0.0),
    guest_spec=GuestSpec(memory_cap=1 << 20),
    max_idle_exchanges=None,
)
daemon = ClientDaemon(
    Path(tempfile.mkdtemp(prefix="dash-home-")), WallClock(),
    lambda url: HttpTransport(server_http.url),
    runtime_config=RuntimeConfig(step_cost=0.001, boot_duration=0.01),
    options=options)
control = serve_control(daemon, ui_dir=None)

print(json.dumps({"control": control.url, "project": URL, "key": KEY}),
      flush=True)
sys.stdin.read()
daemon.stop()
control.stop()
server_http.stop()
