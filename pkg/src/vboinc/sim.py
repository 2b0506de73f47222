"""Simulation harness: link models, the in-memory transport, scenario
execution, and machine-readable reports.

Everything here runs on the virtual clock; a scenario with the same seed
always produces a byte-identical report.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .clock import SimClock
from .errors import (ConnectFailure, NeverCompletes, ScenarioInvalid)
from .protocol import (AttachmentRequest, DepDiskDescriptor, ImageDescriptor,
                       ResultReport, WorkUnit)
from .server import ServerCore
from .transport import Transport

INF = float("inf")


# --------------------------------------------------------------------------
# Link model and transfer arithmetic


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bps: float = 9_000_000.0   # bits per second
    latency: float = 0.0                 # seconds, one way
    loss_rate: float = 0.0               # corruption probability per chunk
    outage_windows: tuple = ()           # ((start, end), ...), end may be inf

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ScenarioInvalid("bandwidth must be positive")
        if not 0 <= self.loss_rate < 1:
            raise ScenarioInvalid("loss_rate must be in [0, 1)")
        windows = sorted(self.outage_windows)
        for (s1, e1), (s2, _e2) in zip(windows, windows[1:]):
            if s2 < e1:
                raise ScenarioInvalid("outage windows must be disjoint")
        object.__setattr__(self, "outage_windows", tuple(windows))

    def in_outage(self, t: float) -> bool:
        return any(s <= t < e for s, e in self.outage_windows)

    def to_wire(self) -> dict:
        return {
            "bandwidth_bps": self.bandwidth_bps,
            "latency": self.latency,
            "loss_rate": self.loss_rate,
            "outage_windows": [list(w) for w in self.outage_windows],
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "LinkModel":
        windows = tuple((float(s), INF if e in (None, "inf") else float(e))
                        for s, e in doc.get("outage_windows", ()))
        return cls(float(doc.get("bandwidth_bps", 9e6)),
                   float(doc.get("latency", 0.0)),
                   float(doc.get("loss_rate", 0.0)), windows)


def advance_active(start: float, active: float, outages: tuple,
                   horizon: float = 1e15) -> float:
    """Instant at which `active` seconds of non-outage time accumulate from
    `start`; transfers pause through outage windows."""
    t = start
    for s, e in outages:
        if t >= e:
            continue
        if t < s:
            span = s - t
            if span >= active:
                return t + active
            active -= span
        t = e
        if t > horizon:
            raise NeverCompletes(
                f"outage extends past horizon {horizon} (until {e})")
    return t + active


def simulate_transfer(nbytes: int, link: LinkModel, start: float = 0.0,
                      chunk_bytes: int = 65536,
                      rng: Optional[random.Random] = None,
                      horizon: float = 1e15) -> float:
    """Transfer duration: latency plus bits over bandwidth, extended by
    per-chunk retransmissions when a loss rate and rng are given, and paused
    across outage windows."""
    if nbytes <= 0:
        raise ValueError("nbytes must be positive")
    if link.loss_rate == 0.0 or rng is None:
        active = link.latency + nbytes * 8.0 / link.bandwidth_bps
        return advance_active(start, active, link.outage_windows, horizon) - start
    t = advance_active(start, link.latency, link.outage_windows, horizon)
    sent = 0
    while sent < nbytes:
        size = min(chunk_bytes, nbytes - sent)
        active = size * 8.0 / link.bandwidth_bps
        while rng.random() < link.loss_rate:  # corrupted: resend the range
            active += link.latency + size * 8.0 / link.bandwidth_bps
        t = advance_active(t, active, link.outage_windows, horizon)
        sent += size
    return t - start


# --------------------------------------------------------------------------
# In-memory transport with modeled timing


class SimTransport(Transport):
    """Direct calls into a ServerCore, timed through a LinkModel.

    Control exchanges fail fast when issued inside an outage window (the
    server is unreachable); in-flight range transfers pause through outages
    instead.  Corruption flips one byte of a delivered range, which the
    caller detects via the chunk digest."""

    def __init__(self, server: ServerCore, clock: SimClock, link: LinkModel,
                 rng: Optional[random.Random] = None, source: str = "client"):
        self.server = server
        self.clock = clock
        self.link = link
        self.rng = rng or random.Random(0)
        self.source = source

    def _control_exchange(self) -> None:
        now = self.clock.now()
        if self.link.in_outage(now):
            raise ConnectFailure(f"server unreachable at t={now:.3f}")
        if self.link.latency:
            self.clock.sleep(2 * self.link.latency)

    def attach(self, req: AttachmentRequest) -> tuple[str, ImageDescriptor]:
        self._control_exchange()
        return self.server.handle_attach(req, source=self.source)

    def probe_dependencies(self, project_url: str) -> DepDiskDescriptor:
        self._control_exchange()
        return self.server.probe_dependencies(project_url, source=self.source)

    def blob_info(self, blob_id: str) -> tuple[int, str]:
        self._control_exchange()
        return self.server.blob_size(blob_id), self.server.blob_digest(blob_id)

    def fetch_range(self, blob_id: str, start: int, end: int) -> tuple[bytes, str]:
        now = self.clock.now()
        if self.link.in_outage(now):
            raise ConnectFailure(f"server unreachable at t={now:.3f}")
        payload = self.server.serve_blob(blob_id, start, end, source=self.source)
        digest = hashlib.sha256(payload).hexdigest()
        done = advance_active(now, self.link.latency
                              + len(payload) * 8.0 / self.link.bandwidth_bps,
                              self.link.outage_windows)
        self.clock.sleep(done - now)
        if self.rng.random() < self.link.loss_rate:
            corrupted = bytearray(payload)
            corrupted[self.rng.randrange(len(corrupted))] ^= 0xFF
            payload = bytes(corrupted)
        return payload, digest

    def fetch_work(self, host_id: str, slots: int) -> list[WorkUnit]:
        self._control_exchange()
        return self.server.dispatch_work(host_id, slots, source=self.source)

    def post_result(self, host_id: str, report: ResultReport) -> dict:
        self._control_exchange()
        return self.server.receive_result(host_id, report, source=self.source)

    def post_error(self, host_id: str, error_id: str, text: str) -> None:
        self._control_exchange()
        self.server.record_error(host_id, error_id, text, source=self.source)

    def stats(self, window: float = 60.0) -> dict:
        self._control_exchange()
        return self.server.throughput_stats(window)


# --------------------------------------------------------------------------
# Scenario definitions


@dataclass(frozen=True)
class ProjectDef:
    url: str
    weak_key: str
    image_bytes: int = 64 * 1024
    depdisk_logical: Optional[int] = 16 * 1024 * 1024
    depdisk_seed_bytes: int = 0
    units: tuple = ()  # (unit_id, program text, deadline) triples
    validation_mode: str = "recompute"


@dataclass(frozen=True)
class ClientDef:
    name: str
    project_url: str
    weak_key: str
    link: LinkModel = LinkModel(bandwidth_bps=80_000_000.0)
    checkpoint_interval: float = 60.0
    keep_latest: int = 1
    memory_cap: int = 8 * 1024 * 1024
    fresh_disk_bytes: int = 4 * 1024 * 1024
    swap_bytes: int = 512 * 1024
    max_idle_exchanges: Optional[int] = 2
    jitter_fraction: float = 0.0


@dataclass(frozen=True)
class ScenarioEvent:
    at: float
    action: str  # kill_guest | recover | pause | resume
    client: int


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    horizon: float = 3600.0
    overhead_factor: float = 1.0
    step_cost: float = 0.001
    boot_duration: float = 2.0
    projects: tuple = ()
    clients: tuple = ()
    events: tuple = ()

    def validate(self) -> None:
        if self.horizon <= 0:
            raise ScenarioInvalid("horizon must be positive")
        if self.overhead_factor < 1:
            raise ScenarioInvalid("overhead_factor must be at least 1")
        urls = {p.url for p in self.projects}
        for client in self.clients:
            if client.project_url not in urls:
                raise ScenarioInvalid(
                    f"client {client.name} references unknown project "
                    f"{client.project_url}")
        for event in self.events:
            if not 0 <= event.client < len(self.clients):
                raise ScenarioInvalid(f"event targets unknown client {event.client}")
            if event.action not in ("kill_guest", "recover", "pause", "resume"):
                raise ScenarioInvalid(f"unknown event action {event.action!r}")

    def to_wire(self) -> dict:
        return {
            "seed": self.seed,
            "horizon": self.horizon,
            "overhead_factor": self.overhead_factor,
            "step_cost": self.step_cost,
            "boot_duration": self.boot_duration,
            "projects": [
                {
                    "url": p.url, "weak_key": p.weak_key,
                    "image_bytes": p.image_bytes,
                    "depdisk_logical": p.depdisk_logical,
                    "depdisk_seed_bytes": p.depdisk_seed_bytes,
                    "validation_mode": p.validation_mode,
                    "units": [{"unit_id": u, "program": prog, "deadline": d}
                              for u, prog, d in p.units],
                } for p in self.projects
            ],
            "clients": [
                {
                    "name": c.name, "project_url": c.project_url,
                    "weak_key": c.weak_key, "link": c.link.to_wire(),
                    "checkpoint_interval": c.checkpoint_interval,
                    "keep_latest": c.keep_latest, "memory_cap": c.memory_cap,
                    "fresh_disk_bytes": c.fresh_disk_bytes,
                    "swap_bytes": c.swap_bytes,
                    "max_idle_exchanges": c.max_idle_exchanges,
                    "jitter_fraction": c.jitter_fraction,
                } for c in self.clients
            ],
            "events": [{"at": e.at, "action": e.action, "client": e.client}
                       for e in self.events],
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "Scenario":
        projects = tuple(
            ProjectDef(
                url=p["url"], weak_key=p["weak_key"],
                image_bytes=int(p.get("image_bytes", 64 * 1024)),
                depdisk_logical=(int(p["depdisk_logical"])
                                 if p.get("depdisk_logical") else None),
                depdisk_seed_bytes=int(p.get("depdisk_seed_bytes", 0)),
                validation_mode=p.get("validation_mode", "recompute"),
                units=tuple((u["unit_id"], u["program"], float(u["deadline"]))
                            for u in p.get("units", ())),
            ) for p in doc.get("projects", ())
        )
        clients = tuple(
            ClientDef(
                name=c["name"], project_url=c["project_url"],
                weak_key=c["weak_key"],
                link=LinkModel.from_wire(c.get("link", {})),
                checkpoint_interval=float(c.get("checkpoint_interval", 60.0)),
                keep_latest=int(c.get("keep_latest", 1)),
                memory_cap=int(c.get("memory_cap", 8 * 1024 * 1024)),
                fresh_disk_bytes=int(c.get("fresh_disk_bytes", 4 * 1024 * 1024)),
                swap_bytes=int(c.get("swap_bytes", 512 * 1024)),
                max_idle_exchanges=(int(c["max_idle_exchanges"])
                                    if c.get("max_idle_exchanges") is not None
                                    else None),
                jitter_fraction=float(c.get("jitter_fraction", 0.0)),
            ) for c in doc.get("clients", ())
        )
        events = tuple(ScenarioEvent(float(e["at"]), e["action"], int(e["client"]))
                       for e in doc.get("events", ()))
        return cls(seed=int(doc.get("seed", 0)),
                   horizon=float(doc.get("horizon", 3600.0)),
                   overhead_factor=float(doc.get("overhead_factor", 1.0)),
                   step_cost=float(doc.get("step_cost", 0.001)),
                   boot_duration=float(doc.get("boot_duration", 2.0)),
                   projects=projects, clients=clients, events=events)


# --------------------------------------------------------------------------
# Scenario execution


def run_scenario(scenario: Scenario, workdir: Optional[Path] = None) -> dict:
    """Drive server, clients, guests, and the event script on a virtual clock
    to quiescence (or the horizon); returns the machine-readable report."""
    import tempfile

    from .catalog import seed_project
    from .client import ClientDaemon, ClientOptions
    from .clock import SimClock
    from .errors import SimulationAborted
    from .protocol import BackoffPolicy
    from .runtime import GuestSpec, RuntimeConfig

    scenario.validate()
    owns_workdir = workdir is None
    workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="volsim-"))
    clock = SimClock(horizon=scenario.horizon)
    server = ServerCore(clock)
    for project in scenario.projects:
        seed_project(server, project.url, project.weak_key,
                     units=list(project.units),
                     image_bytes=project.image_bytes,
                     depdisk_logical=project.depdisk_logical,
                     depdisk_seed_bytes=project.depdisk_seed_bytes,
                     validation_mode=project.validation_mode)

    daemons = []
    for index, cdef in enumerate(scenario.clients):
        rng = random.Random(scenario.seed * 1_000_003 + index)
        link = cdef.link

        def factory(url, _link=link, _rng=rng, _name=cdef.name):
            return SimTransport(server, clock, _link, rng=_rng, source=_name)

        options = ClientOptions(
            checkpoint_interval=cdef.checkpoint_interval,
            keep_latest=cdef.keep_latest,
            fresh_disk_bytes=cdef.fresh_disk_bytes,
            swap_bytes=cdef.swap_bytes,
            backoff=BackoffPolicy(jitter_fraction=cdef.jitter_fraction),
            guest_spec=GuestSpec(memory_cap=cdef.memory_cap),
            max_idle_exchanges=cdef.max_idle_exchanges,
        )
        daemon = ClientDaemon(
            workdir / cdef.name, clock, factory,
            runtime_config=RuntimeConfig(step_cost=scenario.step_cost,
                                         overhead_factor=scenario.overhead_factor,
                                         boot_duration=scenario.boot_duration),
            options=options,
            rng=random.Random(scenario.seed * 7_000_003 + index))
        daemons.append(daemon)

    def event_script():
        for event in sorted(scenario.events, key=lambda e: (e.at,)):
            delay = event.at - clock.now()
            if delay > 0:
                clock.sleep(delay)
            daemon = daemons[event.client]
            try:
                if event.action == "kill_guest":
                    daemon.control_guest("poweroff")
                elif event.action == "recover":
                    daemon.recover_latest()
                elif event.action == "pause":
                    daemon.control_guest("pause")
                elif event.action == "resume":
                    daemon.control_guest("resume")
            except Exception:
                pass  # the event raced a state change; scenario continues

    sessions = []
    aborted = False
    try:
        script = clock.spawn(event_script, name="event-script") \
            if scenario.events else None
        for daemon, cdef in zip(daemons, scenario.clients):
            sessions.append(daemon.attach_project(cdef.project_url, cdef.weak_key))
        for daemon in daemons:
            daemon._pipeline.join(reraise=False)
        if script is not None:
            script.join(reraise=False)
        for daemon in daemons:
            # recoveries spawn fresh supervisors; follow the chain to rest
            while True:
                supervisor = daemon._supervisor
                if supervisor is None:
                    break
                supervisor.join(reraise=False)
                if daemon._supervisor is supervisor:
                    break
    except SimulationAborted:
        aborted = True
    report = _build_report(scenario, clock, server, daemons, sessions, aborted)
    clock.shutdown()
    if owns_workdir:
        import shutil
        shutil.rmtree(workdir, ignore_errors=True)
    return report


def _classify_layers(layer_bytes: dict) -> tuple[int, int]:
    """(vm/boot disk bytes, dependency/data disk bytes)."""
    vm = sum(size for disk_id, size in layer_bytes.items()
             if disk_id.startswith("boot"))
    dep = sum(size for disk_id, size in layer_bytes.items()
              if not disk_id.startswith("boot"))
    return vm, dep


def _build_report(scenario: Scenario, clock, server: ServerCore, daemons,
                  sessions, aborted: bool) -> dict:
    benchmarks: dict[str, dict] = {}
    transfers = []
    phase_timelines = {}
    for daemon, session, cdef in zip(daemons, sessions, scenario.clients):
        journal_path = session.directory / "session.json"
        events = []
        if journal_path.exists():
            events = [json.loads(line) for line in
                      journal_path.read_text().splitlines() if line.strip()]
        phase_timelines[cdef.name] = [
            {"t": e["t"], "phase": e["phase"]} for e in events
            if e["event"] == "phase"]
        for e in events:
            if e["event"] == "transfer_done":
                transfers.append({"client": cdef.name, "blob_id": e["blob_id"],
                                  "bytes": e["bytes"], "t": e["t"]})
        for e in events:
            if e["event"] != "snapshot" or not e.get("unit_id"):
                continue
            row = benchmarks.setdefault(e["unit_id"], {
                "name": e["unit_id"], "snapshots": 0,
                "wall_cost_total": 0.0, "memory_bytes_total": 0,
                "vm_layer_bytes_total": 0, "depdisk_layer_bytes_total": 0,
                "vm_layer_sizes": [], "depdisk_layer_sizes": [],
            })
            vm, dep = _classify_layers(e["layer_bytes"])
            row["snapshots"] += 1
            row["wall_cost_total"] += e["wall_cost"] / 1000.0
            row["memory_bytes_total"] += e["memory_state_bytes"]
            row["vm_layer_bytes_total"] += vm
            row["depdisk_layer_bytes_total"] += dep
            row["vm_layer_sizes"].append(vm)
            row["depdisk_layer_sizes"].append(dep)
    rows = []
    for name in sorted(benchmarks):
        row = benchmarks[name]
        count = max(1, row["snapshots"])
        rows.append({
            "benchmark": name,
            "snapshots": row["snapshots"],
            "snapshot_time_s": row["wall_cost_total"] / count,
            "memory_state_bytes": row["memory_bytes_total"] // count,
            "depdisk_layer_bytes": row["depdisk_layer_bytes_total"] // count,
            "vm_layer_bytes": row["vm_layer_bytes_total"] // count,
            "depdisk_layer_bytes_total": row["depdisk_layer_bytes_total"],
            "vm_layer_bytes_total": row["vm_layer_bytes_total"],
            "depdisk_layer_sizes": row["depdisk_layer_sizes"],
            "vm_layer_sizes": row["vm_layer_sizes"],
        })
    stats = server.throughput_stats(window=max(clock.now(), 1.0))
    return {
        "seed": scenario.seed,
        "horizon": scenario.horizon,
        "aborted_at_horizon": aborted,
        "clock_end": clock.now(),
        "benchmarks": rows,
        "transfers": sorted(transfers, key=lambda t: (t["client"], t["blob_id"])),
        "phases": phase_timelines,
        "counters": stats["counters"],
        "tasks_dispatched_per_day_rate": stats["tasks_dispatched_per_day_rate"],
        "bytes_served": stats["bytes_served"],
    }


# --------------------------------------------------------------------------
# Mode comparison (direct execution vs guest execution)


def compare_modes(program_text: str, overhead_factor: float,
                  memory_cap: int = 64 * 1024 * 1024,
                  step_cost: float = 0.001) -> tuple[float, float]:
    """Run a workload once on the direct executor and once through the guest
    runtime with the overhead factor applied; returns both durations.  The
    ratio demonstrates that the runtime machinery itself adds no modeled
    time beyond the configured factor."""
    from .clock import SimClock
    from .disks import DiskKind, create_disk
    from .runtime import (GuestRuntime, GuestSpec, RuntimeConfig,
                          WorkloadMachine)
    from .workload import WorkloadProgram

    if overhead_factor < 1:
        raise ScenarioInvalid("overhead_factor must be at least 1")
    program = WorkloadProgram.parse(program_text)
    machine = WorkloadMachine(program, "compare", memory_cap,
                              swap_capacity=1 << 62)
    while not machine.halted:
        machine.run_steps(1 << 20)
    direct_duration = machine.steps_total * step_cost

    clock = SimClock()
    runtime = GuestRuntime(clock, RuntimeConfig(
        step_cost=step_cost, overhead_factor=overhead_factor,
        boot_duration=0.5))
    boot = create_disk(DiskKind.FIXED, 64 * 1024, disk_id="boot")
    guest = runtime.register_guest(GuestSpec(memory_cap=memory_cap), boot)
    data = create_disk(DiskKind.DYNAMIC, 64 * 1024 * 1024, disk_id="data")
    guest.attach_disk(data, swap_reserve=32 * 1024 * 1024)

    def drive():
        guest.start()
        guest.submit_job("compare", program)
        guest.wait_for_exit()
        return (guest.job_completed_at or clock.now()) - guest.job_started_at

    activity = clock.spawn(drive)
    activity.join()
    guest_duration = activity.result
    clock.shutdown()
    if guest.machine is not None and machine.emissions != guest.machine.emissions:
        raise ScenarioInvalid("direct and guest emissions diverged")
    return direct_duration, guest_duration


# --------------------------------------------------------------------------
# Reports


CSV_COLUMNS = ("benchmark", "snapshot_time_s", "memory_state_bytes",
               "depdisk_layer_bytes", "vm_layer_bytes")


def emit_report(report: dict, json_path: Optional[Path] = None,
                csv_path: Optional[Path] = None) -> str:
    """Serialize a report with stable field ordering; returns the JSON text."""
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    try:
        if json_path is not None:
            Path(json_path).write_text(text)
        if csv_path is not None:
            buffer = io.StringIO()
            writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS,
                                    extrasaction="ignore")
            writer.writeheader()
            for row in report.get("benchmarks", []):
                writer.writerow(row)
            Path(csv_path).write_text(buffer.getvalue())
    except OSError as exc:
        from .errors import IoFailure
        raise IoFailure(str(exc)) from exc
    return text


# --------------------------------------------------------------------------
# Canned scenarios


BENCHMARK_PROGRAMS = {
    "cpu": "cpu 700000\n",
    "memory": "alloc 4194304\ncpu 700000\n",
    "io": "".join("alloc 524288\ncpu 35000\nfree 524288\n" for _ in range(20)),
    "disk": "".join("write 1 204800\ncpu 70000\n" for _ in range(10)),
    "primes_analog": "cpu 650000\nemit primes 2400\n",
    "sprint_analog": "alloc 6291456\ncpu 500000\nemit correlations 4096\n"
                     "cpu 150000\n",
}


def make_benchmark_scenario(seed: int = 7) -> Scenario:
    """Six workloads with distinct resource profiles, one client each,
    one-minute checkpoints over a ten-plus-minute run."""
    projects = []
    clients = []
    for index, (name, program) in enumerate(sorted(BENCHMARK_PROGRAMS.items())):
        url = f"http://projects.example/{name}"
        projects.append(ProjectDef(
            url=url, weak_key=f"key-{name}", image_bytes=64 * 1024,
            depdisk_logical=16 * 1024 * 1024,
            units=((name, program, 1e8),)))
        clients.append(ClientDef(
            name=f"client-{name}", project_url=url, weak_key=f"key-{name}",
            checkpoint_interval=60.0, keep_latest=50,
            memory_cap=16 * 1024 * 1024, max_idle_exchanges=1))
    return Scenario(seed=seed, horizon=2000.0, projects=tuple(projects),
                    clients=tuple(clients))


def make_kill_recover_scenario(seed: int = 11, kills: tuple = (150.0, 350.0)) -> Scenario:
    url = "http://projects.example/killer"
    units = tuple((f"unit-{n}", "cpu 50000\nemit out 256\ncpu 50000\n"
                   "emit tail 64\n", 1e8) for n in range(3))
    events = []
    for at in kills:
        events.append(ScenarioEvent(at, "kill_guest", 0))
        events.append(ScenarioEvent(at + 5.0, "recover", 0))
    return Scenario(
        seed=seed, horizon=3000.0,
        projects=(ProjectDef(url=url, weak_key="key-k", units=units),),
        clients=(ClientDef(name="client-k", project_url=url, weak_key="key-k",
                           checkpoint_interval=20.0, keep_latest=1,
                           max_idle_exchanges=2),),
        events=tuple(events))
