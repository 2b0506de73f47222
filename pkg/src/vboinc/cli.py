"""Command-line entry points: the operator tool (vboincctl), the client
daemon (vboincd), the project server (vboinc-server), and the scenario
runner (volsim)."""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
from pathlib import Path

import requests

DEFAULT_CONTROL_URL = "http://127.0.0.1:8732"


# --------------------------------------------------------------------------
# vboincctl: talks to the daemon's loopback control API


def _ctl_request(base: str, method: str, path: str, body=None):
    try:
        response = requests.request(method, base.rstrip("/") + path, json=body,
                                    timeout=30)
    except requests.exceptions.RequestException as exc:
        print(f"error: cannot reach daemon at {base}: {exc}", file=sys.stderr)
        raise SystemExit(2)
    try:
        doc = response.json()
    except ValueError:
        doc = {"error": response.text}
    if response.status_code >= 400:
        print(f"error: {doc.get('error', response.status_code)}", file=sys.stderr)
        raise SystemExit(1)
    return doc


def ctl_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vboincctl", description="Control the volunteer client daemon.")
    parser.add_argument("--daemon", default=DEFAULT_CONTROL_URL,
                        help="control API base URL")
    sub = parser.add_subparsers(dest="command", required=True)

    attach = sub.add_parser("attach", help="attach to a project")
    attach.add_argument("url")
    attach.add_argument("--key", required=True, help="weak account key")
    attach.add_argument("--interval", type=float, default=None,
                        help="checkpoint interval, seconds")
    attach.add_argument("--keep", type=int, default=None,
                        help="snapshots to retain")

    sub.add_parser("status", help="show the monitor document")
    sub.add_parser("suspend-job", help="suspend the job inside the guest")
    sub.add_parser("resume-job", help="resume the job inside the guest")
    sub.add_parser("pause-vm", help="pause the guest itself")
    sub.add_parser("resume-vm", help="resume a paused guest")
    sub.add_parser("snapshot-now", help="take a checkpoint immediately")
    sub.add_parser("restore", help="recover from the newest snapshot")
    sub.add_parser("detach", help="end the inner attachment")
    setint = sub.add_parser("set-interval", help="change the checkpoint interval")
    setint.add_argument("seconds", type=float)

    args = parser.parse_args(argv)
    base = args.daemon

    if args.command == "attach":
        body = {"project_url": args.url, "weak_account_key": args.key}
        if args.interval is not None:
            body["checkpoint_interval"] = args.interval
        if args.keep is not None:
            body["keep_latest"] = args.keep
        doc = _ctl_request(base, "POST", "/attach", body)
    elif args.command == "status":
        doc = _ctl_request(base, "GET", "/status")
    elif args.command == "suspend-job":
        doc = _ctl_request(base, "POST", "/command", {"command": "suspend"})
    elif args.command == "resume-job":
        doc = _ctl_request(base, "POST", "/command", {"command": "resume"})
    elif args.command == "pause-vm":
        doc = _ctl_request(base, "POST", "/vmcontrol", {"action": "pause"})
    elif args.command == "resume-vm":
        doc = _ctl_request(base, "POST", "/vmcontrol", {"action": "resume"})
    elif args.command == "snapshot-now":
        doc = _ctl_request(base, "POST", "/snapshot")
    elif args.command == "restore":
        doc = _ctl_request(base, "POST", "/restore")
    elif args.command == "detach":
        doc = _ctl_request(base, "POST", "/command", {"command": "detach"})
    elif args.command == "set-interval":
        doc = _ctl_request(base, "POST", "/settings",
                           {"checkpoint_interval": args.seconds})
    else:  # pragma: no cover
        parser.error("unknown command")
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


# --------------------------------------------------------------------------
# vboincd: the daemon process


def daemon_main(argv=None) -> int:
    from .client import ClientDaemon
    from .clock import WallClock
    from .controlapi import serve
    from .runtime import RuntimeConfig
    from .transport import HttpTransport, server_base

    parser = argparse.ArgumentParser(
        prog="vboincd", description="Volunteer client daemon.")
    parser.add_argument("--home", default="~/.vboinc", help="session directory")
    parser.add_argument("--port", type=int, default=8732,
                        help="loopback control API port")
    parser.add_argument("--ui", default=None,
                        help="directory of dashboard assets served at /ui")
    parser.add_argument("--boot-duration", type=float, default=0.05,
                        help="modeled guest boot time, seconds")
    parser.add_argument("--resume", action="store_true",
                        help="recover the persisted session at startup")
    args = parser.parse_args(argv)

    clock = WallClock()
    daemon = ClientDaemon(
        Path(args.home).expanduser(), clock,
        transport_factory=lambda url: HttpTransport(server_base(url)),
        runtime_config=RuntimeConfig(boot_duration=args.boot_duration))
    ui_dir = Path(args.ui).expanduser() if args.ui else None
    service = serve(daemon, port=args.port, ui_dir=ui_dir)
    print(f"vboincd: control API on {service.url}"
          + (f", dashboard at {service.url}/ui" if ui_dir else ""))
    if args.resume:
        try:
            daemon.resume_after_restart()
            print("vboincd: recovered persisted session")
        except Exception as exc:
            print(f"vboincd: nothing to resume ({exc})")
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    stop.wait()
    daemon.stop()
    service.stop()
    return 0


# --------------------------------------------------------------------------
# vboinc-server: the project server process


def server_main(argv=None) -> int:
    from .catalog import seed_project
    from .clock import WallClock
    from .server import ServerCore
    from .serverhttp import serve

    parser = argparse.ArgumentParser(
        prog="vboinc-server", description="Project server.")
    parser.add_argument("--data", default="~/.vboinc-server",
                        help="journal and blob directory")
    parser.add_argument("--port", type=int, default=8731)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--seed-demo", metavar="URL", default=None,
                        help="register a demo project at this URL before serving")
    parser.add_argument("--demo-key", default="demo-key")
    parser.add_argument("--demo-units", type=int, default=4)
    args = parser.parse_args(argv)

    core = ServerCore(WallClock(), data_dir=Path(args.data).expanduser())
    if args.seed_demo and args.seed_demo not in core.projects:
        units = [(f"demo-{n}", "cpu 2000\nemit result 512\n", 1e9)
                 for n in range(args.demo_units)]
        seed_project(core, args.seed_demo, args.demo_key, units=units)
        print(f"vboinc-server: seeded demo project {args.seed_demo} "
              f"(key {args.demo_key!r}, {args.demo_units} units)")
    service = serve(core, host=args.host, port=args.port)
    print(f"vboinc-server: listening on {service.url}")
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    stop.wait()
    service.stop()
    core.close()
    return 0


# --------------------------------------------------------------------------
# volsim: scenario runner


def volsim_main(argv=None) -> int:
    from .sim import (Scenario, emit_report, make_benchmark_scenario,
                      make_kill_recover_scenario, run_scenario)

    parser = argparse.ArgumentParser(
        prog="volsim", description="Deterministic end-to-end simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario", help="scenario JSON path")
    run.add_argument("--out", default="report.json")
    run.add_argument("--csv", default=None)
    run.add_argument("--seed", type=int, default=None,
                     help="override the scenario seed")

    canned = sub.add_parser("canned", help="write a canned scenario file")
    canned.add_argument("name", choices=["benchmarks", "kill-recover"])
    canned.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    if args.command == "canned":
        scenario = make_benchmark_scenario() if args.name == "benchmarks" \
            else make_kill_recover_scenario()
        out = Path(args.out or f"{args.name}.json")
        out.write_text(json.dumps(scenario.to_wire(), indent=2) + "\n")
        print(f"volsim: wrote {out}")
        return 0

    doc = json.loads(Path(args.scenario).read_text())
    scenario = Scenario.from_wire(doc)
    if args.seed is not None:
        from dataclasses import replace
        scenario = replace(scenario, seed=args.seed)
    report = run_scenario(scenario)
    emit_report(report, Path(args.out), Path(args.csv) if args.csv else None)
    lines = [f"{row['benchmark']}: {row['snapshots']} snapshots, "
             f"mean memory {row['memory_state_bytes']} B"
             for row in report["benchmarks"]]
    print(f"volsim: clock ended at {report['clock_end']:.3f}s; "
          f"completed={report['counters']['completed']}")
    for line in lines:
        print("  " + line)
    print(f"volsim: report written to {args.out}")
    return 0
