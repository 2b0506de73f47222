"""Host-side orchestrator daemon.

One attachment session at a time: attach to a project, download the guest
image and any dependency disk concurrently (both must finish before
instantiation), unpack and register the guest, relay job-level commands into
it, checkpoint it periodically, prune stale snapshots, recover from the
newest snapshot after kills or daemon restarts, and report captured errors
to the server through a durable queue.

The daemon is clock-agnostic: bound to the wall clock it is the real
service; bound to the virtual clock it runs inside the simulation harness
unchanged.
"""

from __future__ import annotations

import json
import random
import threading
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

from .clock import Activity
from .disks import DiskImage, DiskKind, create_disk, disk_from_file
from .errors import (ConnectFailure, GuestNotRunning, IllegalControl,
                     NoSnapshot, SnapshotFailed, TransferFailed,
                     TransportError, UnknownCommand, VBoincError)
from .inner import InnerAgent
from .packaging import import_depdisk_package, sha256_file, unpack
from .protocol import (AttachmentRequest, BackoffPolicy, ClientPhase,
                       DepDiskDescriptor, HostDescriptor, ImageDescriptor,
                       advance_phase, next_backoff)
from .runtime import (GuestRuntime, GuestSpec, GuestState, MemoryState,
                      RuntimeConfig, SnapshotRecord, TERMINAL_STATES)
from .transport import Transport

GiB = 1024 ** 3

INNER_COMMANDS = ("suspend", "resume", "reset", "detach", "update",
                  "nomorework", "allowmorework")


@dataclass(frozen=True)
class ClientOptions:
    checkpoint_interval: float = 60.0
    keep_latest: int = 1
    fresh_disk_bytes: int = 8 * GiB
    swap_bytes: int = 1 * GiB
    chunk_bytes: int = 65536
    retry_budget: int = 6
    backoff: BackoffPolicy = BackoffPolicy()
    guest_spec: GuestSpec = GuestSpec()
    host_descriptor: HostDescriptor = HostDescriptor("linux", "x86_64",
                                                     4 * GiB, 2)
    max_idle_exchanges: Optional[int] = None  # agent detaches after N empty fetches


@dataclass
class TransferTask:
    blob_id: str
    total_bytes: int
    digest_expected: str
    path: Path
    received_bytes: int = 0
    status: str = "pending"  # pending | active | done | failed

    def to_wire(self) -> dict:
        return {
            "blob_id": self.blob_id,
            "total_bytes": self.total_bytes,
            "received_bytes": self.received_bytes,
            "status": self.status,
        }


@dataclass
class AttachmentSession:
    session_id: str
    project_url: str
    weak_key: str
    options: ClientOptions
    directory: Path
    phase: ClientPhase = ClientPhase.DETACHED
    failure_reason: str = ""
    host_id: str = ""
    image: Optional[ImageDescriptor] = None
    dep_disk: Optional[DepDiskDescriptor] = None
    transfers: dict = field(default_factory=dict)  # blob_id -> TransferTask
    guest = None
    boot_disk: Optional[DiskImage] = None
    data_disk: Optional[DiskImage] = None
    snapshots: list = field(default_factory=list)  # SnapshotRecords, oldest first
    acked_units: list = field(default_factory=list)
    last_error: str = ""
    snapshot_failures: int = 0
    freed_bytes_total: int = 0
    guest_was_started: bool = False


class _Notifier:
    """Re-armable wakeup usable under either clock."""

    def __init__(self, clock):
        self._clock = clock
        self._lock = threading.Lock()
        self._event = clock.new_event()

    def wait(self, timeout: Optional[float] = None) -> None:
        with self._lock:
            event = self._event
        event.wait(timeout)

    def notify(self) -> None:
        with self._lock:
            old = self._event
            self._event = self._clock.new_event()
        old.set()


class ClientDaemon:
    def __init__(self, home: Path, clock,
                 transport_factory: Callable[[str], Transport],
                 runtime_config: Optional[RuntimeConfig] = None,
                 options: Optional[ClientOptions] = None,
                 rng: Optional[random.Random] = None):
        self.home = Path(home)
        self.home.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self.transport_factory = transport_factory
        self.runtime = GuestRuntime(clock, runtime_config or RuntimeConfig())
        self.options = options or ClientOptions()
        self.rng = rng or random.Random()
        self.session: Optional[AttachmentSession] = None
        self.transport: Optional[Transport] = None
        self._lock = threading.RLock()
        self._stopping = False
        self._pipeline: Optional[Activity] = None
        self._supervisor: Optional[Activity] = None
        self._timer: Optional[Activity] = None
        self._agent_activity: Optional[Activity] = None
        self._agent: Optional[InnerAgent] = None
        self._error_notifier = _Notifier(clock)
        self._error_delivery: Optional[Activity] = None
        self.phase_log: list[tuple[float, str]] = []

    # -- session persistence ------------------------------------------------

    def _journal(self, session: AttachmentSession, event: dict) -> None:
        event = dict(event)
        event["t"] = self.clock.now()
        path = session.directory / "session.json"
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def _advance(self, session: AttachmentSession, event: str) -> None:
        session.phase = advance_phase(session.phase, event)
        self.phase_log.append((self.clock.now(), session.phase.value))
        self._journal(session, {"event": "phase", "phase": session.phase.value,
                                "cause": event,
                                "reason": session.failure_reason})

    # -- attach pipeline -------------------------------------------------------

    def attach_project(self, project_url: str, weak_key: str,
                       **overrides) -> AttachmentSession:
        with self._lock:
            if self.session is not None and self.session.phase not in (
                    ClientPhase.DETACHED, ClientPhase.FAILED):
                raise IllegalControl("an attachment session is already active")
            options = replace(self.options, **overrides) if overrides else self.options
            session_id = uuid.uuid4().hex[:8]
            directory = self.home / f"session-{session_id}"
            for sub in ("image", "disks", "snapshots"):
                (directory / sub).mkdir(parents=True, exist_ok=True)
            session = AttachmentSession(session_id, project_url, weak_key,
                                        options, directory)
            self.session = session
            self.transport = self.transport_factory(project_url)
            self._journal(session, {"event": "attach_requested",
                                    "project_url": project_url,
                                    "checkpoint_interval": options.checkpoint_interval,
                                    "keep_latest": options.keep_latest})
        self._ensure_error_delivery()
        self._pipeline = self.clock.spawn(lambda: self._run_pipeline(session),
                                          name="attach-pipeline")
        return session

    def _retrying(self, session: AttachmentSession, what: str, fn):
        """Run a server exchange under backoff; raises after the retry budget."""
        attempt = 0
        while True:
            try:
                return fn()
            except (ConnectFailure, TransportError) as exc:
                attempt += 1
                if attempt >= session.options.retry_budget:
                    raise ConnectFailure(f"{what}: {exc}") from exc
                self.clock.sleep(next_backoff(session.options.backoff, attempt - 1,
                                              self.rng))

    def _run_pipeline(self, session: AttachmentSession) -> None:
        try:
            self._advance(session, "attach_submitted")
            request = AttachmentRequest(session.project_url, session.weak_key,
                                        session.options.host_descriptor)
            host_id, image = self._retrying(session, "attach",
                                            lambda: self.transport.attach(request))
            session.host_id = host_id
            session.image = image
            session.dep_disk = self._retrying(
                session, "dependency probe",
                lambda: self.transport.probe_dependencies(session.project_url))
            self._journal(session, {"event": "attached", "host_id": host_id,
                                    "image": image.to_wire(),
                                    "dep_disk": session.dep_disk.to_wire()})
            self._advance(session, "probe_done")

            image_task = TransferTask(
                image.image_id, image.payload_bytes_compressed,
                image.content_digest,
                session.directory / "image" / "image-package.tgz")
            script_task = self._script_task(session, image)
            tasks = [image_task, script_task]
            dep_task = None
            if session.dep_disk.present:
                size, digest = self._retrying(
                    session, "dependency info",
                    lambda: self.transport.blob_info(session.dep_disk.disk_id))
                dep_task = TransferTask(
                    session.dep_disk.disk_id, size, digest,
                    session.directory / "image" / "depdisk-package.tgz")
                tasks.append(dep_task)
            session.transfers = {t.blob_id: t for t in tasks}
            self.fetch_concurrent(session, tasks)
            self._advance(session, "downloads_done")

            self.instantiate(session, image_task, dep_task, script_task)
            self._advance(session, "instantiated")

            session.guest.start()
            session.guest_was_started = True
            self._journal(session, {"event": "guest_started",
                                    "address": session.guest.address})
            self._advance(session, "guest_started")
            self._start_guest_services(session)
            self._supervise(session)
        except VBoincError as exc:
            self._fail(session, f"{type(exc).__name__}: {exc}")
        except AssertionError as exc:
            self._fail(session, f"internal: {exc}")

    def _script_task(self, session: AttachmentSession,
                     image: ImageDescriptor) -> TransferTask:
        size, digest = self._retrying(
            session, "script info",
            lambda: self.transport.blob_info(image.instantiation_script_id))
        return TransferTask(image.instantiation_script_id, size, digest,
                            session.directory / "image" / "instantiate.sh")

    def _fail(self, session: AttachmentSession, reason: str) -> None:
        session.failure_reason = reason
        session.last_error = reason
        try:
            self._advance(session, "guest_error")
        except VBoincError:
            session.phase = ClientPhase.FAILED
        self.report_error(session, reason)

    # -- transfers ----------------------------------------------------------------

    def fetch_concurrent(self, session: AttachmentSession,
                         tasks: list[TransferTask]) -> None:
        """Run every transfer in parallel and return only when all are done."""
        activities = [
            self.clock.spawn(lambda t=t: self._run_transfer(session, t),
                             name=f"transfer-{t.blob_id}")
            for t in tasks
        ]
        failures = []
        for activity in activities:
            try:
                activity.join()
            except VBoincError as exc:
                failures.append(exc)
        if failures:
            raise failures[0]

    def _run_transfer(self, session: AttachmentSession, task: TransferTask) -> None:
        task.status = "active"
        part = task.path.with_suffix(task.path.suffix + ".part")
        if part.exists():
            task.received_bytes = part.stat().st_size  # resume after interruption
        else:
            part.touch()
            task.received_bytes = 0
        chunk = session.options.chunk_bytes
        with open(part, "r+b") as fh:
            fh.seek(task.received_bytes)
            while task.received_bytes < task.total_bytes:
                start = task.received_bytes
                end = min(start + chunk, task.total_bytes)
                data = self._fetch_verified_chunk(session, task, start, end)
                fh.write(data)
                fh.flush()
                task.received_bytes = end
        if sha256_file(part) != task.digest_expected:
            task.status = "failed"
            raise TransferFailed(task.blob_id, "final digest mismatch")
        part.replace(task.path)
        task.status = "done"
        self._journal(session, {"event": "transfer_done", "blob_id": task.blob_id,
                                "bytes": task.total_bytes})

    def _fetch_verified_chunk(self, session: AttachmentSession, task: TransferTask,
                              start: int, end: int) -> bytes:
        import hashlib
        budget = max(8, session.options.retry_budget)
        attempt = 0
        while True:
            data, sent_digest = self._retrying(
                session, f"range {start}-{end} of {task.blob_id}",
                lambda: self.transport.fetch_range(task.blob_id, start, end))
            if hashlib.sha256(data).hexdigest() == sent_digest:
                return data
            attempt += 1  # corrupted in transit: request the same range again
            if attempt >= budget:
                task.status = "failed"
                raise TransferFailed(task.blob_id,
                                     f"chunk at {start} corrupt after {attempt} tries")

    # -- instantiation ----------------------------------------------------------------

    def instantiate(self, session: AttachmentSession, image_task: TransferTask,
                    dep_task: Optional[TransferTask],
                    script_task: TransferTask) -> None:
        unpack_dir = session.directory / "image" / "unpacked"
        image_file, _script_file = unpack(image_task.path, unpack_dir,
                                          expected_digest=image_task.digest_expected)
        # the instantiation script's duties (decompress, hand control back)
        # are interpreted natively rather than shelled out
        session.boot_disk = disk_from_file(
            image_file, disk_id=f"boot-{session.session_id}")
        session.guest = self.runtime.register_guest(session.options.guest_spec,
                                                    session.boot_disk)
        session.guest.auto_exit_on_job_done = False  # the agent drives exit
        if dep_task is not None:
            data_disk = import_depdisk_package(
                dep_task.path, session.directory / "disks",
                expected_digest=dep_task.digest_expected)
        else:
            data_disk = create_disk(DiskKind.DYNAMIC,
                                    session.options.fresh_disk_bytes,
                                    disk_id=f"data-{session.session_id}")
        session.data_disk = data_disk
        swap = min(session.options.swap_bytes, data_disk.logical_size // 2)
        session.guest.attach_disk(data_disk, swap_reserve=swap)
        self._journal(session, {
            "event": "instantiated",
            "guest_spec": session.options.guest_spec.to_wire(),
            "boot_disk": session.boot_disk.disk_id,
            "data_disk": data_disk.disk_id,
            "swap_reserve": swap,
            "depdisk_attached": dep_task is not None,
        })

    # -- guest services ---------------------------------------------------------------

    def _start_guest_services(self, session: AttachmentSession) -> None:
        self._spawn_agent(session)
        self._spawn_timer(session)

    def _spawn_agent(self, session: AttachmentSession) -> None:
        self._agent = InnerAgent(
            session.guest, self.transport, session.host_id, self.clock,
            policy=session.options.backoff, rng=self.rng,
            max_idle_exchanges=session.options.max_idle_exchanges,
            on_result_ack=lambda unit_id: self._ack_result(session, unit_id))
        self._agent_activity = self.clock.spawn(self._agent.run, name="inner-agent")

    def _spawn_timer(self, session: AttachmentSession) -> None:
        self._timer = self.clock.spawn(lambda: self._checkpoint_loop(session),
                                       name="checkpoint-timer")

    def _ack_result(self, session: AttachmentSession, unit_id: str) -> None:
        session.acked_units.append(unit_id)
        self._journal(session, {"event": "result_ack", "unit_id": unit_id})

    def _checkpoint_loop(self, session: AttachmentSession) -> None:
        while not self._stopping:
            self.clock.sleep(session.options.checkpoint_interval)
            if self.session is not session:
                return
            if session.phase not in (ClientPhase.GUEST_RUNNING,
                                     ClientPhase.GUEST_SUSPENDED):
                return
            try:
                self.checkpoint_tick(session)
                session.snapshot_failures = 0
            except SnapshotFailed as exc:
                session.snapshot_failures += 1
                session.last_error = str(exc)
                if session.snapshot_failures >= 3:
                    self._fail(session, f"checkpointing failed 3 times: {exc}")
                    return

    def _supervise(self, session: AttachmentSession) -> None:
        """Owns the guest until the session ends; restarts services after
        recovery."""
        while True:
            state, errors = session.guest.wait_for_exit()
            if self.session is not session or self._stopping:
                return
            if state is GuestState.FAULTED:
                if session.snapshots:
                    self.report_error(session, errors or "guest faulted")
                    try:
                        self.recover_latest(session)
                        continue
                    except VBoincError as exc:
                        self._fail(session, f"recovery failed: {exc}")
                        return
                self._fail(session, errors or "guest faulted")  # reports once
                return
            # clean exit or operator poweroff: the session closes, snapshots
            # stay available for an explicit restore
            self._journal(session, {"event": "guest_exit",
                                    "status": session.guest.exit_status})
            if session.phase in (ClientPhase.GUEST_RUNNING,
                                 ClientPhase.GUEST_SUSPENDED):
                self._advance(session, "guest_exit_ok")
            return

    # -- checkpointing ---------------------------------------------------------------

    def checkpoint_tick(self, session: AttachmentSession) -> SnapshotRecord:
        guest = session.guest
        if guest is None:
            raise SnapshotFailed("no guest")
        record = guest.snapshot()
        session.snapshots.append(record)
        self._persist_snapshot(session, record)
        freed = self._prune(session)
        session.freed_bytes_total += freed
        self._journal(session, {"event": "snapshot", **record.meta(),
                                "freed_bytes": freed})
        return record

    def _persist_snapshot(self, session: AttachmentSession,
                          record: SnapshotRecord) -> None:
        if record.memory_state is not None:
            path = session.directory / "snapshots" / f"{record.snapshot_id}.vmem"
            path.write_bytes(record.memory_state.blob)
        for disk in (session.boot_disk, session.data_disk):
            if disk is not None:
                disk.save(session.directory / "disks")

    def _prune(self, session: AttachmentSession) -> int:
        keep = session.options.keep_latest
        if keep < 1 or len(session.snapshots) <= keep:
            return 0
        dropped = session.snapshots[:-keep]
        session.snapshots = session.snapshots[-keep:]
        kept_layers: dict[str, set] = {}
        for record in session.snapshots:
            for disk_id, layer_id in record.disk_layers.items():
                kept_layers.setdefault(disk_id, set()).add(layer_id)
        freed = 0
        for disk in (session.boot_disk, session.data_disk):
            if disk is None:
                continue
            freed += disk.prune_stale(kept_layers.get(disk.disk_id, set()))
            disk.save(session.directory / "disks")
        for record in dropped:
            session.guest.forget_snapshot(record.snapshot_id)
            vmem = session.directory / "snapshots" / f"{record.snapshot_id}.vmem"
            if vmem.exists():
                vmem.unlink()
        self._journal(session, {
            "event": "pruned",
            "kept": [r.snapshot_id for r in session.snapshots],
            "freed_bytes": freed,
        })
        return freed

    # -- recovery ---------------------------------------------------------------------

    def recover_latest(self, session: Optional[AttachmentSession] = None) -> None:
        session = session or self.session
        if session is None or not session.snapshots:
            raise NoSnapshot("no snapshot retained")
        record = session.snapshots[-1]
        self._advance(session, "recovery_started")
        guest = session.guest
        guest.restore(record)
        if guest.state is GuestState.SAVED:
            guest.start()
        session.failure_reason = ""
        self._advance(session, "recovery_done")
        self._journal(session, {"event": "recovered",
                                "snapshot_id": record.snapshot_id})
        # the agent and timer die with the old incarnation; restart them
        if self._agent_activity is None or self._agent_activity.finished:
            self._spawn_agent(session)
        if self._timer is None or self._timer.finished:
            self._spawn_timer(session)
        # an externally-triggered recovery also needs a fresh exit watcher
        pipeline_live = self._pipeline is not None and not self._pipeline.finished
        supervisor_live = self._supervisor is not None and not self._supervisor.finished
        if not pipeline_live and not supervisor_live:
            self._supervisor = self.clock.spawn(
                lambda: self._supervise(session), name="supervisor")

    # -- command relay and control ------------------------------------------------------

    def relay_inner(self, command: str):
        session = self._require_session()
        if command not in INNER_COMMANDS:
            raise UnknownCommand(command)
        if session.phase is not ClientPhase.GUEST_RUNNING:
            raise GuestNotRunning(f"session is {session.phase.value}")
        return session.guest.exec_in_guest(command)

    def control_guest(self, action: str) -> GuestState:
        session = self._require_session()
        if session.guest is None:
            raise IllegalControl("no guest")
        state = session.guest.control(action)
        if action == "pause":
            self._advance(session, "suspend")
        elif action == "resume":
            self._advance(session, "resume")
        # poweroff: the supervisor observes the exit and closes the session
        return state

    def set_settings(self, checkpoint_interval: Optional[float] = None,
                     keep_latest: Optional[int] = None) -> None:
        session = self._require_session()
        changes = {}
        if checkpoint_interval is not None:
            if checkpoint_interval < 10.0:
                raise ValueError("checkpoint interval must be at least 10 s")
            changes["checkpoint_interval"] = checkpoint_interval
        if keep_latest is not None:
            if keep_latest < 1:
                raise ValueError("keep_latest must be at least 1")
            changes["keep_latest"] = keep_latest
        session.options = replace(session.options, **changes)
        self._journal(session, {"event": "settings", **changes})

    def _require_session(self) -> AttachmentSession:
        if self.session is None:
            raise IllegalControl("no attachment session")
        return self.session

    # -- error reporting -------------------------------------------------------------

    def report_error(self, session: AttachmentSession, text: str) -> None:
        if not text:
            return
        entry = {"error_id": uuid.uuid4().hex, "text": text,
                 "host_id": session.host_id, "t": self.clock.now()}
        queue_path = session.directory / "errors.queue"
        with open(queue_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        self._error_notifier.notify()

    def _ensure_error_delivery(self) -> None:
        if self._error_delivery is None or self._error_delivery.finished:
            self._error_delivery = self.clock.spawn(self._deliver_errors,
                                                    name="error-delivery")

    def _queue_path(self) -> Optional[Path]:
        if self.session is None:
            return None
        return self.session.directory / "errors.queue"

    def _deliver_errors(self) -> None:
        attempt = 0
        while not self._stopping:
            path = self._queue_path()
            entries = []
            if path is not None and path.exists():
                entries = [json.loads(line) for line in
                           path.read_text(encoding="utf-8").splitlines() if line]
            if not entries:
                self._error_notifier.wait()
                continue
            entry = entries[0]
            try:
                self.transport.post_error(entry.get("host_id", ""),
                                          entry["error_id"], entry["text"])
                attempt = 0
                remaining = entries[1:]
                with open(path, "w", encoding="utf-8") as fh:
                    for item in remaining:
                        fh.write(json.dumps(item, sort_keys=True) + "\n")
            except (ConnectFailure, TransportError):
                attempt += 1
                self.clock.sleep(next_backoff(self.options.backoff, attempt - 1, self.rng))

    # -- monitoring -----------------------------------------------------------------

    def monitor(self) -> dict:
        session = self.session
        if session is None:
            return {"phase": ClientPhase.DETACHED.value, "session": None}
        guest = session.guest
        doc = {
            "phase": session.phase.value,
            "failure_reason": session.failure_reason,
            "session": session.session_id,
            "project_url": session.project_url,
            "host_id": session.host_id,
            "transfers": [t.to_wire() for t in session.transfers.values()],
            "snapshots": [r.meta() for r in session.snapshots],
            "settings": {
                "checkpoint_interval": session.options.checkpoint_interval,
                "keep_latest": session.options.keep_latest,
            },
            "acked_units": list(session.acked_units),
            "last_error": session.last_error or session.failure_reason,
            "freed_bytes_total": session.freed_bytes_total,
            "guest": None,
        }
        if guest is not None:
            sample = guest.sample()
            doc["guest"] = {
                "state": guest.current_state().value,
                "address": guest.address,
                "resources": sample.to_wire(),
                "memory_current": guest.machine.memory_usage()[0] if guest.machine else 0,
                "unit_id": guest.machine.unit_id if guest.machine else None,
                "job_suspended": guest.job_suspended,
                "no_more_work": guest.no_more_work,
            }
        return doc

    # -- restart support ----------------------------------------------------------------

    def load_session(self) -> Optional[AttachmentSession]:
        """Rebuild the persisted session after a daemon restart.  The guest is
        re-registered cold; recover_latest() resumes from the newest record."""
        candidates = sorted(self.home.glob("session-*/session.json"))
        if not candidates:
            return None
        journal_path = candidates[-1]
        directory = journal_path.parent
        events = [json.loads(line) for line in
                  journal_path.read_text(encoding="utf-8").splitlines() if line]
        opts = self.options
        session = AttachmentSession(
            session_id=directory.name.split("session-", 1)[1],
            project_url="", weak_key="", options=opts, directory=directory)
        spec_doc = None
        snapshot_events = {}
        kept: list[str] = []
        for event in events:
            kind = event["event"]
            if kind == "attach_requested":
                session.project_url = event["project_url"]
                opts = replace(opts,
                               checkpoint_interval=event["checkpoint_interval"],
                               keep_latest=event["keep_latest"])
            elif kind == "attached":
                session.host_id = event["host_id"]
                session.image = ImageDescriptor.from_wire(event["image"])
                session.dep_disk = DepDiskDescriptor.from_wire(event["dep_disk"])
            elif kind == "instantiated":
                spec_doc = event
            elif kind == "snapshot":
                snapshot_events[event["snapshot_id"]] = event
                kept.append(event["snapshot_id"])
            elif kind == "pruned":
                kept = list(event["kept"])
            elif kind == "settings":
                changes = {k: v for k, v in event.items()
                           if k in ("checkpoint_interval", "keep_latest")}
                opts = replace(opts, **changes)
            elif kind == "result_ack":
                session.acked_units.append(event["unit_id"])
            elif kind == "guest_started":
                session.guest_was_started = True
        session.options = opts
        self.session = session
        self.transport = self.transport_factory(session.project_url)
        self._ensure_error_delivery()
        if spec_doc is None:
            session.phase = ClientPhase.FAILED
            session.failure_reason = "daemon restarted before instantiation"
            return session
        disks_dir = directory / "disks"
        session.boot_disk = DiskImage.load(disks_dir, spec_doc["boot_disk"])
        session.data_disk = DiskImage.load(disks_dir, spec_doc["data_disk"])
        spec = GuestSpec.from_wire(spec_doc["guest_spec"])
        session.guest = self.runtime.register_guest(spec, session.boot_disk)
        session.guest.auto_exit_on_job_done = False
        session.guest.attach_disk(session.data_disk,
                                  swap_reserve=spec_doc["swap_reserve"])
        for snapshot_id in kept:
            event = snapshot_events[snapshot_id]
            memory = None
            vmem = directory / "snapshots" / f"{snapshot_id}.vmem"
            if vmem.exists():
                memory = MemoryState(vmem.read_bytes())
            record = SnapshotRecord(
                snapshot_id=snapshot_id,
                settings_copy=spec,
                disk_layers=dict(event["disk_layers"]),
                memory_state=memory,
                created_at=event["created_at"] / 1000.0,
                wall_cost=event["wall_cost"] / 1000.0,
                layer_bytes=dict(event["layer_bytes"]),
            )
            session.guest.adopt_snapshot(record)
            session.snapshots.append(record)
        session.phase = ClientPhase.FAILED if session.guest_was_started \
            else ClientPhase.DETACHED
        session.failure_reason = "daemon restarted"
        return session

    def resume_after_restart(self) -> None:
        """Convenience: load the persisted session and recover it."""
        session = self.load_session()
        if session is None:
            raise NoSnapshot("no persisted session")
        self.recover_latest(session)

    def stop(self) -> None:
        self._stopping = True
        self._error_notifier.notify()
