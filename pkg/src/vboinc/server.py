"""Project server core: host registry, image catalog, work dispatch,
result validation, and throughput accounting.

State-changing events append to a JSONL journal replayed at startup, so a
restarted server resumes exactly where it stopped; blob payloads live as
files beside the journal.  Blob serving is read-only and safe to run fully
in parallel; every mutation is linearized behind one lock.

Result validation defaults to recompute: the unit's program is re-executed
in a local sandbox (unlimited swap, so only deterministic `fail`
instructions fault) and the reported emissions must match byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import (BadRange, DuplicateResult, UnknownBlob, UnknownHost,
                     UnknownKey, UnknownProject, UnknownUnit)
from .protocol import (AttachmentRequest, DepDiskDescriptor, HostDescriptor,
                       ImageDescriptor, ResultReport, WorkUnit)
from .runtime import execute_program
from .workload import WorkloadProgram

DAY_SECONDS = 86400.0


@dataclass
class HostRecord:
    host_id: str
    host_descriptor: HostDescriptor
    attach_time: float
    last_contact: float
    outstanding_units: set[str] = field(default_factory=set)


@dataclass
class UnitState:
    unit: WorkUnit
    project_url: str
    status: str = "queued"  # queued | outstanding | completed | failed
    assigned_host: Optional[str] = None
    requeue_count: int = 0


@dataclass
class ProjectRecord:
    project_url: str
    image: ImageDescriptor
    dep_disk: DepDiskDescriptor
    validation_mode: str = "recompute"  # recompute | accept
    queue: deque = field(default_factory=deque)  # unit ids, FIFO
    results: dict[str, ResultReport] = field(default_factory=dict)


class ServerCore:
    def __init__(self, clock, data_dir: Optional[Path] = None):
        self.clock = clock
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self._lock = threading.RLock()
        self.keys: set[str] = set()
        self.projects: dict[str, ProjectRecord] = {}
        self.hosts: dict[str, HostRecord] = {}
        self.units: dict[str, UnitState] = {}
        self.blobs: dict[str, bytes] = {}
        self.blob_digests: dict[str, str] = {}
        self.error_log: list[dict] = []
        self.request_log: list[dict] = []
        self.counters = {"dispatched": 0, "completed": 0, "failed": 0,
                         "requeued": 0, "rejected": 0}
        self._dispatch_times: list[float] = []
        self._served: list[tuple[float, int]] = []
        self._journal_fh = None
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            (self.data_dir / "blobs").mkdir(exist_ok=True)
            self._replay_journal()
            self._journal_fh = open(self.data_dir / "journal.jsonl", "a",
                                    encoding="utf-8")

    # -- journal -----------------------------------------------------------

    def _journal(self, event: dict) -> None:
        if self._journal_fh is not None:
            self._journal_fh.write(json.dumps(event, sort_keys=True) + "\n")
            self._journal_fh.flush()

    def _replay_journal(self) -> None:
        path = self.data_dir / "journal.jsonl"
        if not path.exists():
            return
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            self._apply(json.loads(line))

    def _apply(self, event: dict) -> None:
        kind = event["event"]
        if kind == "key":
            self.keys.add(event["key"])
        elif kind == "project":
            record = ProjectRecord(
                project_url=event["project_url"],
                image=ImageDescriptor.from_wire(event["image"]),
                dep_disk=DepDiskDescriptor.from_wire(event["dep_disk"]),
                validation_mode=event["validation_mode"],
            )
            self.projects[record.project_url] = record
        elif kind == "work":
            unit = WorkUnit.from_wire(event["unit"])
            state = UnitState(unit, event["project_url"])
            self.units[unit.unit_id] = state
            self.projects[event["project_url"]].queue.append(unit.unit_id)
        elif kind == "attach":
            descriptor = HostDescriptor.from_wire(event["host_descriptor"])
            host = self.hosts.get(event["host_id"])
            if host is None:
                self.hosts[event["host_id"]] = HostRecord(
                    event["host_id"], descriptor, event["t"], event["t"])
            else:
                host.last_contact = event["t"]
        elif kind == "dispatch":
            state = self.units[event["unit_id"]]
            project = self.projects[state.project_url]
            if state.unit.unit_id in project.queue:
                project.queue.remove(state.unit.unit_id)
            state.status = "outstanding"
            state.assigned_host = event["host_id"]
            self.hosts[event["host_id"]].outstanding_units.add(event["unit_id"])
            self.counters["dispatched"] += 1
            self._dispatch_times.append(event["t"])
        elif kind == "result":
            state = self.units[event["unit_id"]]
            host = self.hosts.get(state.assigned_host or "")
            if host is not None:
                host.outstanding_units.discard(event["unit_id"])
            if event["verdict"] == "accepted":
                state.status = "completed"
                self.counters["completed"] += 1
                report = ResultReport.from_wire(event["report"])
                self.projects[state.project_url].results[event["unit_id"]] = report
            else:
                self.counters["rejected"] += 1
                self._requeue_or_fail(state)
        elif kind == "expired":
            state = self.units[event["unit_id"]]
            host = self.hosts.get(state.assigned_host or "")
            if host is not None:
                host.outstanding_units.discard(event["unit_id"])
            self._requeue_or_fail(state)
        elif kind == "error":
            self.error_log.append({k: event[k] for k in
                                   ("host_id", "error_id", "text", "t")})

    def _requeue_or_fail(self, state: UnitState) -> None:
        state.assigned_host = None
        if state.requeue_count < 1:
            state.requeue_count += 1
            state.status = "queued"
            self.projects[state.project_url].queue.append(state.unit.unit_id)
            self.counters["requeued"] += 1
        else:
            state.status = "failed"
            self.counters["failed"] += 1

    # -- admin interface --------------------------------------------------------

    def register_key(self, key: str) -> None:
        with self._lock:
            if key not in self.keys:
                self._journal({"event": "key", "key": key})
                self.keys.add(key)

    def register_project(self, project_url: str, image_package: bytes,
                         image_uncompressed: int, script: bytes,
                         depdisk_package: Optional[bytes] = None,
                         validation_mode: str = "recompute") -> ProjectRecord:
        with self._lock:
            slug = hashlib.sha256(project_url.encode()).hexdigest()[:8]
            image_id = f"image-{slug}"
            script_id = f"script-{slug}"
            self._store_blob(image_id, image_package)
            self._store_blob(script_id, script)
            image = ImageDescriptor(
                image_id=image_id,
                payload_bytes_compressed=len(image_package),
                payload_bytes_uncompressed=image_uncompressed,
                content_digest=hashlib.sha256(image_package).hexdigest(),
                instantiation_script_id=script_id,
            )
            if depdisk_package is not None:
                dep_id = f"depdisk-{slug}"
                self._store_blob(dep_id, depdisk_package)
                dep = DepDiskDescriptor(dep_id, len(depdisk_package), project_url, True)
            else:
                dep = DepDiskDescriptor(None, None, project_url, False)
            event = {"event": "project", "project_url": project_url,
                     "image": image.to_wire(), "dep_disk": dep.to_wire(),
                     "validation_mode": validation_mode}
            self._journal(event)
            self._apply(event)
            return self.projects[project_url]

    def add_work(self, project_url: str, unit: WorkUnit) -> None:
        with self._lock:
            if project_url not in self.projects:
                raise UnknownProject(project_url)
            if unit.unit_id in self.units:
                raise ValueError(f"unit id {unit.unit_id} already registered")
            WorkloadProgram.parse(unit.program)  # reject malformed programs early
            event = {"event": "work", "project_url": project_url,
                     "unit": unit.to_wire()}
            self._journal(event)
            self._apply(event)

    def _store_blob(self, blob_id: str, payload: bytes) -> None:
        self.blobs[blob_id] = payload
        self.blob_digests[blob_id] = hashlib.sha256(payload).hexdigest()
        if self.data_dir is not None:
            (self.data_dir / "blobs" / blob_id).write_bytes(payload)

    def _load_blob(self, blob_id: str) -> bytes:
        payload = self.blobs.get(blob_id)
        if payload is None and self.data_dir is not None:
            path = self.data_dir / "blobs" / blob_id
            if path.exists():
                payload = path.read_bytes()
                self.blobs[blob_id] = payload
        if payload is None:
            raise UnknownBlob(blob_id)
        return payload

    # -- client-facing operations --------------------------------------------------

    def host_id_for(self, req: AttachmentRequest) -> str:
        basis = json.dumps([req.weak_account_key, req.host_descriptor.to_wire()],
                           sort_keys=True)
        return "h-" + hashlib.sha256(basis.encode()).hexdigest()[:12]

    def handle_attach(self, req: AttachmentRequest,
                      source: str = "") -> tuple[str, ImageDescriptor]:
        with self._lock:
            self._log_request("attach", None, source)
            if req.weak_account_key not in self.keys:
                raise UnknownKey("weak account key not recognized")
            project = self.projects.get(req.project_url)
            if project is None:
                raise UnknownProject(req.project_url)
            host_id = self.host_id_for(req)
            event = {"event": "attach", "host_id": host_id,
                     "host_descriptor": req.host_descriptor.to_wire(),
                     "t": self.clock.now()}
            self._journal(event)
            self._apply(event)
            return host_id, project.image

    def probe_dependencies(self, project_url: str,
                           source: str = "") -> DepDiskDescriptor:
        with self._lock:
            self._log_request("probe", None, source)
            project = self.projects.get(project_url)
            if project is None:
                raise UnknownProject(project_url)
            return project.dep_disk

    def _sweep_deadlines(self) -> None:
        now = self.clock.now()
        for state in list(self.units.values()):
            if state.status == "outstanding" and now > state.unit.deadline:
                event = {"event": "expired", "unit_id": state.unit.unit_id,
                         "t": now}
                self._journal(event)
                self._apply(event)

    def dispatch_work(self, host_id: str, slots: int,
                      source: str = "") -> list[WorkUnit]:
        with self._lock:
            self._log_request("fetch_work", host_id, source)
            host = self.hosts.get(host_id)
            if host is None:
                raise UnknownHost(host_id)
            if slots < 1:
                raise ValueError("slots must be at least 1")
            self._sweep_deadlines()
            host.last_contact = self.clock.now()
            granted: list[WorkUnit] = []
            for project in self.projects.values():
                while project.queue and len(granted) < slots:
                    unit_id = project.queue[0]
                    event = {"event": "dispatch", "unit_id": unit_id,
                             "host_id": host_id, "t": self.clock.now()}
                    self._journal(event)
                    self._apply(event)
                    granted.append(self.units[unit_id].unit)
                if len(granted) >= slots:
                    break
            return granted

    def receive_result(self, host_id: str, report: ResultReport,
                       source: str = "") -> dict:
        with self._lock:
            self._log_request("post_result", host_id, source)
            if host_id not in self.hosts:
                raise UnknownHost(host_id)
            state = self.units.get(report.unit_id)
            if state is None:
                raise UnknownUnit(report.unit_id)
            if state.status == "completed":
                raise DuplicateResult(report.unit_id)
            if state.status != "outstanding" or state.assigned_host != host_id:
                raise UnknownUnit(
                    f"unit {report.unit_id} is not outstanding for {host_id}")
            self.hosts[host_id].last_contact = self.clock.now()
            project = self.projects[state.project_url]
            if project.validation_mode == "recompute":
                machine = execute_program(
                    WorkloadProgram.parse(state.unit.program), state.unit.unit_id)
                expected = [(name, data) for name, data in machine.emissions]
                got = [(name, data) for name, data in report.output_blobs]
                verdict = "accepted" if expected == got else "rejected"
                reason = "" if verdict == "accepted" else "emission mismatch"
            else:
                verdict, reason = "accepted", ""
            event = {"event": "result", "unit_id": report.unit_id,
                     "host_id": host_id, "verdict": verdict,
                     "report": report.to_wire(), "t": self.clock.now()}
            self._journal(event)
            self._apply(event)
            return {"verdict": verdict, "reason": reason}

    def record_error(self, host_id: str, error_id: str, text: str,
                     source: str = "") -> None:
        if not text:
            return
        with self._lock:
            self._log_request("post_error", host_id, source)
            if any(e["error_id"] == error_id for e in self.error_log):
                return  # duplicate delivery of a queued report
            event = {"event": "error", "host_id": host_id, "error_id": error_id,
                     "text": text, "t": self.clock.now()}
            self._journal(event)
            self._apply(event)

    # -- blob serving (read-only) ----------------------------------------------------

    def blob_size(self, blob_id: str) -> int:
        return len(self._load_blob(blob_id))

    def blob_digest(self, blob_id: str) -> str:
        self._load_blob(blob_id)
        return self.blob_digests.get(blob_id) or hashlib.sha256(
            self.blobs[blob_id]).hexdigest()

    def serve_blob(self, blob_id: str, start: Optional[int] = None,
                   end: Optional[int] = None, source: str = "") -> bytes:
        payload = self._load_blob(blob_id)
        size = len(payload)
        lo = 0 if start is None else start
        hi = size if end is None else end
        if lo < 0 or hi > size or lo >= hi:
            raise BadRange(f"[{lo}, {hi}) of blob {blob_id} sized {size}")
        chunk = payload[lo:hi]
        with self._lock:
            self._log_request("serve_blob", None, source)
            self._served.append((self.clock.now(), len(chunk)))
        return chunk

    # -- stats -------------------------------------------------------------------------

    def _log_request(self, kind: str, host_id: Optional[str], source: str) -> None:
        self.request_log.append({"t": self.clock.now(), "kind": kind,
                                 "host_id": host_id, "source": source})

    def throughput_stats(self, window: float) -> dict:
        with self._lock:
            now = self.clock.now()
            cutoff = now - window
            dispatched = sum(1 for t in self._dispatch_times if t >= cutoff)
            served = sum(n for t, n in self._served if t >= cutoff)
            rate = dispatched * DAY_SECONDS / window if window > 0 else 0.0
            return {
                "window": window,
                "tasks_dispatched_per_day_rate": rate,
                "bytes_served": served,
                "counters": dict(self.counters),
            }

    def check_conservation(self) -> None:
        """dispatched == completed + failed + outstanding + requeued, always."""
        with self._lock:
            outstanding = sum(1 for s in self.units.values()
                              if s.status == "outstanding")
            lhs = self.counters["dispatched"]
            rhs = (self.counters["completed"] + self.counters["failed"]
                   + outstanding + self.counters["requeued"])
            assert lhs == rhs, f"conservation violated: {lhs} != {rhs} " \
                               f"({self.counters}, outstanding={outstanding})"

    def close(self) -> None:
        if self._journal_fh is not None:
            self._journal_fh.close()
            self._journal_fh = None
