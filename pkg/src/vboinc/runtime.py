"""Guest runtime: lifecycle control, in-guest execution, snapshot/restore.

The runtime is a hypervisor abstraction with one shipped backend, a
deterministic sandbox that executes the workload language.  Execution is
lazily synchronized against the clock: nothing steps per-instruction in real
time; instead every public operation first advances the job to the current
instant (integer microseconds internally, so replays are exact).  Two runs
of the same program under the same spec produce identical instruction
traces, emissions, and disk content, which is what the snapshot/restore and
server-validation oracles rely on.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .clock import EventLike
from .disks import DiskImage
from .errors import (BootTimeout, DiskBusy, GuestNotRunning, IllegalControl,
                     NoDiskAttached, NotAttached, SnapshotCorrupt,
                     SnapshotFailed, SpecInvalid, UnknownSnapshot)
from .workload import WorkloadProgram, fill_bytes

import threading

GiB = 1024 ** 3
MiB = 1024 ** 2

MAX_UNIT_ID_BYTES = 64

MEMORY_MAGIC = b"VMEM"
MEMORY_VERSION = 1
# magic, version, pc, cpu_progress, cpu tick hundredths, disk bytes written,
# flags, backoff attempt
_MEM_HEADER = struct.Struct("<4sHQQQQBI")
# fixed blob bytes outside the memory-charged payload: header + unit/program/
# cursor/alloc/resident/emission length fields
_MEM_FIXED = _MEM_HEADER.size + 2 + 4 + 4 + 4 + 8 + 4


def memory_state_allowance(attached_disks: int) -> int:
    """Fixed serialization overhead of a memory-state blob; everything beyond
    this is charged against the guest's memory cap."""
    return _MEM_FIXED + MAX_UNIT_ID_BYTES + 8 * attached_disks


@dataclass(frozen=True)
class GuestSpec:
    memory_cap: int = 1 * GiB
    cpu_count: int = 1
    exec_cap_percent: int = 100
    headless: bool = True

    def __post_init__(self):
        if self.memory_cap <= 0:
            raise SpecInvalid("memory_cap must be positive")
        if self.cpu_count < 1:
            raise SpecInvalid("cpu_count must be at least 1")
        if not 0 < self.exec_cap_percent <= 100:
            raise SpecInvalid("exec_cap_percent must be in (0, 100]")
        if not self.headless:
            raise SpecInvalid("guests are always headless")

    def to_wire(self) -> dict:
        return {
            "memory_cap": self.memory_cap,
            "cpu_count": self.cpu_count,
            "exec_cap_percent": self.exec_cap_percent,
            "headless": self.headless,
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "GuestSpec":
        return cls(int(doc["memory_cap"]), int(doc["cpu_count"]),
                   int(doc["exec_cap_percent"]), bool(doc["headless"]))


class GuestState(str, Enum):
    REGISTERED = "registered"
    RUNNING = "running"
    PAUSED = "paused"
    SAVED = "saved"
    EXITED = "exited"
    FAULTED = "faulted"

TERMINAL_STATES = (GuestState.EXITED, GuestState.FAULTED)


@dataclass(frozen=True)
class ResourceSample:
    timestamp: float
    cpu_ticks_used: int
    memory_in_use: int  # high-water mark, so samples are monotone within a run
    disk_bytes_written: int

    def to_wire(self) -> dict:
        return {
            "timestamp": int(round(self.timestamp * 1000)),
            "cpu_ticks_used": self.cpu_ticks_used,
            "memory_in_use": self.memory_in_use,
            "disk_bytes_written": self.disk_bytes_written,
        }


@dataclass(frozen=True)
class MemoryState:
    blob: bytes

    @property
    def size_bytes(self) -> int:
        return len(self.blob)


@dataclass
class SnapshotRecord:
    snapshot_id: str
    settings_copy: GuestSpec
    disk_layers: dict[str, str]  # disk_id -> frozen layer id
    memory_state: Optional[MemoryState]
    created_at: float
    wall_cost: float
    layer_bytes: dict[str, int] = field(default_factory=dict)
    unit_id: Optional[str] = None  # job loaded at capture time, if any

    def meta(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "created_at": int(round(self.created_at * 1000)),
            "wall_cost": int(round(self.wall_cost * 1000)),
            "memory_state_bytes": self.memory_state.size_bytes if self.memory_state else 0,
            "disk_layers": dict(self.disk_layers),
            "layer_bytes": dict(self.layer_bytes),
            "unit_id": self.unit_id,
        }


@dataclass(frozen=True)
class SnapshotCostModel:
    base: float = 0.5                     # seconds
    memory_dump_rate: float = 64 * MiB    # bytes/second
    layer_flush_rate: float = 128 * MiB   # bytes/second

    def cost(self, memory_bytes: int, layer_bytes: int) -> float:
        return (self.base + memory_bytes / self.memory_dump_rate
                + layer_bytes / self.layer_flush_rate)


@dataclass(frozen=True)
class RuntimeConfig:
    guest_backend: str = "sandbox"
    step_cost: float = 0.001        # simulated seconds per scheduler step
    overhead_factor: float = 1.0    # >1.0 models virtualization slowdown
    boot_duration: float = 2.0      # modeled boot wall time
    boot_bound: float = 20.0        # contract: backends must boot within this
    snapshot_cost: SnapshotCostModel = SnapshotCostModel()


@dataclass(frozen=True)
class ExecResult:
    exit_code: int
    stdout: str


# --------------------------------------------------------------------------
# Workload machine: the execution core shared by the sandbox guest, the
# direct executor, and server-side recompute validation.


class WorkloadMachine:
    """Steps a program under the memory model; no notion of time.

    Memory accounting charges what the memory image serializes: program
    text, eight bytes of bookkeeping per live allocation, emission payloads,
    and resident allocation bytes.  Allocation payloads beyond the cap spill
    to swap up to `swap_capacity`; anything further faults.
    """

    def __init__(self, program: WorkloadProgram, unit_id: str, memory_cap: int,
                 exec_cap_percent: int = 100, swap_capacity: int = 0,
                 disk_regions: Optional[list[int]] = None,
                 disk_writer: Optional[Callable[[int, int, bytes], None]] = None):
        if len(unit_id.encode("utf-8")) > MAX_UNIT_ID_BYTES:
            raise ValueError(f"unit id longer than {MAX_UNIT_ID_BYTES} bytes")
        self.program = program
        self.unit_id = unit_id
        self.memory_cap = memory_cap
        self.exec_cap = exec_cap_percent
        self.swap_capacity = swap_capacity
        self.disk_regions = list(disk_regions or [])
        self.disk_writer = disk_writer
        self.pc = 0
        self.cpu_progress = 0  # hundredth-ticks into the current cpu instruction
        self.cpu_tick_hundredths = 0
        self.disk_bytes_written = 0
        self.write_cursors = [0] * len(self.disk_regions)
        self.alloc_table: list[int] = []
        self.emissions: list[tuple[str, bytes]] = []
        self.fault_reason: Optional[str] = None
        self.trace: list[tuple] = []
        self.memory_high_water = 0
        self.steps_total = 0
        self._check_memory()

    # -- memory model -----------------------------------------------------

    def _fixed_footprint(self) -> int:
        emission_bytes = sum(6 + len(n.encode()) + len(d) for n, d in self.emissions)
        return (len(self.program.source.encode("utf-8"))
                + 8 * len(self.alloc_table) + emission_bytes)

    def memory_usage(self) -> tuple[int, int]:
        """(ram resident bytes, swapped bytes)."""
        fixed = self._fixed_footprint()
        payload = sum(self.alloc_table)
        available = self.memory_cap - fixed
        swapped = max(0, payload - max(available, 0))
        resident = payload - swapped
        return fixed + resident, swapped

    def _check_memory(self) -> bool:
        fixed = self._fixed_footprint()
        if fixed > self.memory_cap:
            self._fault("memory cap exceeded by non-swappable data")
            return False
        resident, swapped = self.memory_usage()
        if swapped > self.swap_capacity:
            self._fault("memory limit exceeded (cap plus swap)")
            return False
        self.memory_high_water = max(self.memory_high_water, resident)
        return True

    def _fault(self, reason: str) -> None:
        self.fault_reason = reason
        self.trace.append(("fault", reason))

    # -- stepping ------------------------------------------------------------

    @property
    def done(self) -> bool:
        return self.pc >= len(self.program.instructions)

    @property
    def halted(self) -> bool:
        return self.done or self.fault_reason is not None

    def _cpu_steps_left(self, ticks: int) -> int:
        need = ticks * 100 - self.cpu_progress
        return max(1, -(-need // self.exec_cap)) if need > 0 else 1

    def remaining_steps(self) -> int:
        if self.halted:
            return 0
        total = 0
        for index in range(self.pc, len(self.program.instructions)):
            ins = self.program.instructions[index]
            if ins.op == "cpu":
                if index == self.pc:
                    total += self._cpu_steps_left(ins.ticks)
                else:
                    total += max(1, -(-ins.ticks * 100 // self.exec_cap))
            else:
                total += 1
            if ins.op == "fail":
                break
        return total

    def _write_to_disk(self, index: int, nbytes: int) -> None:
        region = (self.disk_regions[index]
                  if index < len(self.disk_regions) else 1 << 62)
        if region <= 0:
            self._fault(f"disk {index} has no writable space")
            return
        while index >= len(self.write_cursors):
            self.write_cursors.append(0)
        cursor = self.write_cursors[index]
        data = fill_bytes(f"{self.unit_id}:{index}:{self.pc}", nbytes)
        pos = 0
        while pos < len(data):
            take = min(len(data) - pos, region - cursor)
            if self.disk_writer is not None and index < len(self.disk_regions):
                self.disk_writer(index, cursor, data[pos:pos + take])
            cursor = (cursor + take) % region
            pos += take
        self.write_cursors[index] = cursor
        self.disk_bytes_written += nbytes

    def run_steps(self, budget: int) -> int:
        """Execute up to `budget` scheduler steps; returns steps consumed."""
        executed = 0
        instructions = self.program.instructions
        while executed < budget and not self.halted:
            ins = instructions[self.pc]
            if ins.op == "cpu":
                steps_left = self._cpu_steps_left(ins.ticks)
                take = min(steps_left, budget - executed)
                self.cpu_progress += take * self.exec_cap
                self.cpu_tick_hundredths += take * self.exec_cap
                executed += take
                if take == steps_left:
                    self.cpu_progress = 0
                    self.trace.append(("exec", self.pc, ins.render()))
                    self.pc += 1
                continue
            executed += 1
            if ins.op == "alloc":
                self.alloc_table.append(ins.nbytes)
                if not self._check_memory():
                    break
            elif ins.op == "free":
                remaining = ins.nbytes
                while remaining > 0 and self.alloc_table:
                    last = self.alloc_table[-1]
                    if last <= remaining:
                        self.alloc_table.pop()
                        remaining -= last
                    else:
                        self.alloc_table[-1] = last - remaining
                        remaining = 0
            elif ins.op == "write":
                self._write_to_disk(ins.disk_index, ins.nbytes)
                if self.fault_reason is not None:
                    break
            elif ins.op == "emit":
                data = fill_bytes(f"{self.unit_id}:{ins.name}:{self.pc}", ins.nbytes)
                self.emissions.append((ins.name, data))
                self.trace.append(("emit", ins.name, ins.nbytes))
                if not self._check_memory():
                    break
            elif ins.op == "fail":
                self._fault(ins.message)
                break
            self.trace.append(("exec", self.pc, ins.render()))
            self.pc += 1
        if self.done and (not self.trace or self.trace[-1] != ("done",)):
            self.trace.append(("done",))
        self.steps_total += executed
        return executed


def execute_program(program: WorkloadProgram, unit_id: str = "direct",
                    spec: Optional[GuestSpec] = None,
                    swap_capacity: int = 1 << 62) -> WorkloadMachine:
    """Run a program to completion outside any guest (server recompute and
    the direct-mode executor); unlimited swap so only `fail` faults."""
    spec = spec or GuestSpec()
    machine = WorkloadMachine(program, unit_id, spec.memory_cap,
                              spec.exec_cap_percent, swap_capacity=swap_capacity)
    while not machine.halted:
        machine.run_steps(1 << 20)
    return machine


# --------------------------------------------------------------------------
# Memory-state serialization


def encode_memory_state(machine: WorkloadMachine, flags: dict[str, bool],
                        backoff_attempt: int) -> MemoryState:
    flag_byte = (
        (1 if flags.get("job_present") else 0)
        | (2 if flags.get("job_suspended") else 0)
        | (4 if flags.get("no_more_work") else 0)
        | (8 if flags.get("update_requested") else 0)
        | (16 if flags.get("detached") else 0)
    )
    out = bytearray()
    out += _MEM_HEADER.pack(MEMORY_MAGIC, MEMORY_VERSION, machine.pc,
                            machine.cpu_progress, machine.cpu_tick_hundredths,
                            machine.disk_bytes_written, flag_byte, backoff_attempt)
    unit = machine.unit_id.encode("utf-8")
    out += struct.pack("<H", len(unit)) + unit
    program = machine.program.source.encode("utf-8")
    out += struct.pack("<I", len(program)) + program
    out += struct.pack("<I", len(machine.write_cursors))
    for cursor in machine.write_cursors:
        out += struct.pack("<Q", cursor)
    out += struct.pack("<I", len(machine.alloc_table))
    for size in machine.alloc_table:
        out += struct.pack("<Q", size)
    resident, _swapped = machine.memory_usage()
    resident_payload = resident - machine._fixed_footprint()
    out += struct.pack("<Q", resident_payload)
    out += b"\x00" * resident_payload
    out += struct.pack("<I", len(machine.emissions))
    for name, data in machine.emissions:
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<I", len(data)) + data
    return MemoryState(bytes(out))


def decode_memory_state(state: MemoryState, memory_cap: int,
                        exec_cap_percent: int, swap_capacity: int,
                        disk_regions: list[int],
                        disk_writer: Optional[Callable[[int, int, bytes], None]]
                        ) -> tuple[WorkloadMachine, dict[str, bool], int]:
    blob = state.blob
    try:
        (magic, version, pc, cpu_progress, ticks, written, flag_byte,
         backoff) = _MEM_HEADER.unpack_from(blob, 0)
        if magic != MEMORY_MAGIC or version != MEMORY_VERSION:
            raise SnapshotCorrupt("bad memory-state header")
        offset = _MEM_HEADER.size
        (unit_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        unit_id = blob[offset:offset + unit_len].decode("utf-8")
        offset += unit_len
        (prog_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        source = blob[offset:offset + prog_len].decode("utf-8")
        offset += prog_len
        (cursor_count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        cursors = []
        for _ in range(cursor_count):
            (c,) = struct.unpack_from("<Q", blob, offset)
            cursors.append(c)
            offset += 8
        (alloc_count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        allocs = []
        for _ in range(alloc_count):
            (a,) = struct.unpack_from("<Q", blob, offset)
            allocs.append(a)
            offset += 8
        (resident_payload,) = struct.unpack_from("<Q", blob, offset)
        offset += 8 + resident_payload
        (emission_count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        emissions = []
        for _ in range(emission_count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (data_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            data = blob[offset:offset + data_len]
            offset += data_len
            emissions.append((name, data))
        if offset != len(blob):
            raise SnapshotCorrupt("trailing bytes in memory state")
    except (struct.error, UnicodeDecodeError) as exc:
        raise SnapshotCorrupt(f"cannot decode memory state: {exc}") from exc
    program = WorkloadProgram.parse(source)
    machine = WorkloadMachine(program, unit_id, memory_cap, exec_cap_percent,
                              swap_capacity, disk_regions, disk_writer)
    machine.pc = pc
    machine.cpu_progress = cpu_progress
    machine.cpu_tick_hundredths = ticks
    machine.disk_bytes_written = written
    machine.write_cursors = cursors
    machine.alloc_table = allocs
    machine.emissions = emissions
    machine._check_memory()
    flags = {
        "job_present": bool(flag_byte & 1),
        "job_suspended": bool(flag_byte & 2),
        "no_more_work": bool(flag_byte & 4),
        "update_requested": bool(flag_byte & 8),
        "detached": bool(flag_byte & 16),
    }
    return machine, flags, backoff


# --------------------------------------------------------------------------
# Sandbox guest


INNER_COMMANDS = ("suspend", "resume", "reset", "detach", "update",
                  "nomorework", "allowmorework")
DIAGNOSTIC_COMMANDS = ("status", "resources")


class SandboxGuest:
    """The deterministic reference backend.

    A control activity owns the handle; the runtime serializes all public
    calls behind one lock.  Waiting never happens while the lock is held.
    """

    backend_name = "sandbox"

    def __init__(self, guest_id: str, spec: GuestSpec, clock, config: RuntimeConfig,
                 address: str):
        self.guest_id = guest_id
        self.spec = spec
        self.clock = clock
        self.config = config
        self.address = address
        self.state = GuestState.REGISTERED
        self.exit_status: Optional[str] = None  # "ok" | "killed"
        self.fault_reason: Optional[str] = None
        self.captured_errors: list[str] = []
        self.attached_disks: list[DiskImage] = []
        self.swap_reservations: dict[str, int] = {}
        self.auto_exit_on_job_done = True
        self.machine: Optional[WorkloadMachine] = None
        self.job_done_pending = False
        self.job_suspended = False
        self.no_more_work = False
        self.update_requested = False
        self.detached = False
        self.backoff_attempt = 0
        self.job_started_at: Optional[float] = None
        self.job_completed_at: Optional[float] = None
        self._snapshots: dict[str, SnapshotRecord] = {}
        self._snap_counter = 0
        self._last_sync_us = 0
        self._lock = threading.RLock()
        self._change: EventLike = clock.new_event()
        self._exit_event: EventLike = clock.new_event()

    # -- plumbing ---------------------------------------------------------

    def _now_us(self) -> int:
        return int(round(self.clock.now() * 1e6))

    @property
    def _step_us(self) -> int:
        return max(1, int(round(self.config.step_cost * self.config.overhead_factor * 1e6)))

    def _notify(self) -> None:
        old = self._change
        self._change = self.clock.new_event()
        old.set()

    def _disk_regions(self) -> list[int]:
        regions = []
        for disk in self.attached_disks:
            regions.append(disk.logical_size - self.swap_reservations.get(disk.disk_id, 0))
        return regions

    @property
    def swap_capacity(self) -> int:
        return sum(self.swap_reservations.values())

    def _disk_writer(self, index: int, offset: int, data: bytes) -> None:
        self.attached_disks[index].write_range(offset, data)

    def _stepping(self) -> bool:
        return (self.state is GuestState.RUNNING and self.machine is not None
                and not self.machine.halted and not self.job_done_pending
                and not self.job_suspended)

    def _sync(self) -> None:
        now_us = self._now_us()
        if not self._stepping():
            self._last_sync_us = now_us
            return
        budget = (now_us - self._last_sync_us) // self._step_us
        if budget > 0:
            machine = self.machine
            executed = machine.run_steps(budget)
            self._last_sync_us += executed * self._step_us
            if machine.fault_reason is not None:
                self._fault(machine.fault_reason)
            elif machine.done:
                self.job_completed_at = self._last_sync_us / 1e6
                self.job_done_pending = True
                if self.auto_exit_on_job_done:
                    self._exit("ok")
                self._notify()
        self._last_sync_us = now_us

    def _fault(self, reason: str) -> None:
        self.state = GuestState.FAULTED
        self.fault_reason = reason
        self.captured_errors.append(reason)
        self._exit_event.set()
        self._notify()

    def _exit(self, status: str) -> None:
        self.state = GuestState.EXITED
        self.exit_status = status
        self._exit_event.set()
        self._notify()

    def _projected_end_us(self) -> Optional[int]:
        if not self._stepping():
            return None
        return self._last_sync_us + self.machine.remaining_steps() * self._step_us

    # -- disks ---------------------------------------------------------------

    def attach_disk(self, disk: DiskImage, swap_reserve: int = 0) -> None:
        with self._lock:
            if self.state is not GuestState.REGISTERED:
                raise DiskBusy(f"cannot attach while {self.state.value}")
            if swap_reserve < 0 or swap_reserve > disk.logical_size:
                raise SpecInvalid("swap reservation exceeds disk size")
            # seal the shipped content under a copy-on-write overlay so the
            # first snapshot freezes a floor-sized layer, not the base image
            if disk.active_layer_id == disk.base_layer_id:
                disk.freeze_and_branch()
            self.attached_disks.append(disk)
            if swap_reserve:
                self.swap_reservations[disk.disk_id] = swap_reserve

    def detach_disk(self, disk: DiskImage) -> None:
        with self._lock:
            if self.state not in (GuestState.REGISTERED, GuestState.EXITED):
                raise DiskBusy(f"cannot detach while {self.state.value}")
            if disk not in self.attached_disks:
                raise NotAttached(disk.disk_id)
            self.attached_disks.remove(disk)
            self.swap_reservations.pop(disk.disk_id, None)

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        with self._lock:
            if self.state not in (GuestState.REGISTERED, GuestState.SAVED):
                raise IllegalControl(f"cannot start from {self.state.value}")
            if not self.attached_disks:
                raise NoDiskAttached(self.guest_id)
            if self.config.boot_duration > self.config.boot_bound:
                raise BootTimeout(
                    f"boot takes {self.config.boot_duration}s, bound is "
                    f"{self.config.boot_bound}s")
        self.clock.sleep(self.config.boot_duration)
        with self._lock:
            self.state = GuestState.RUNNING
            self._last_sync_us = self._now_us()
            self._notify()

    def control(self, action: str) -> GuestState:
        with self._lock:
            if action == "pause":
                if self.state is not GuestState.RUNNING:
                    raise IllegalControl(f"pause from {self.state.value}")
                self._sync()
                if self.state is GuestState.RUNNING:
                    self.state = GuestState.PAUSED
            elif action == "resume":
                if self.state is not GuestState.PAUSED:
                    raise IllegalControl(f"resume from {self.state.value}")
                self.state = GuestState.RUNNING
                self._last_sync_us = self._now_us()
            elif action == "poweroff":
                if self.state not in (GuestState.RUNNING, GuestState.PAUSED):
                    raise IllegalControl(f"poweroff from {self.state.value}")
                self._sync()
                if self.state not in TERMINAL_STATES:  # job may have just ended
                    self.machine = None  # in-memory state discarded; disks persist
                    self.job_done_pending = False
                    self._exit("killed")
            else:
                raise IllegalControl(f"unknown action {action!r}")
            self._notify()
            return self.state

    # -- job slot (used by the inner work agent and tests) ----------------------

    def submit_job(self, unit_id: str, program: WorkloadProgram) -> None:
        with self._lock:
            if self.state is not GuestState.RUNNING:
                raise GuestNotRunning(self.guest_id)
            if self.machine is not None and not self.job_done_pending:
                raise IllegalControl("a job is already loaded")
            self._sync()
            if self.state is not GuestState.RUNNING:
                raise GuestNotRunning(self.guest_id)
            self.job_done_pending = False
            self.machine = WorkloadMachine(
                program, unit_id, self.spec.memory_cap, self.spec.exec_cap_percent,
                self.swap_capacity, self._disk_regions(), self._disk_writer)
            self.job_started_at = self.clock.now()
            self.job_completed_at = None
            self._last_sync_us = self._now_us()
            if self.machine.fault_reason is not None:
                self._fault(self.machine.fault_reason)
            self._notify()

    def collect_result(self) -> tuple[str, list[tuple[str, bytes]], float]:
        with self._lock:
            self._sync()
            if self.machine is None or not self.job_done_pending:
                raise IllegalControl("no completed job to collect")
            machine = self.machine
            wall = (self.job_completed_at or 0.0) - (self.job_started_at or 0.0)
            unit_id = machine.unit_id
            emissions = list(machine.emissions)
            self.machine = None
            self.job_done_pending = False
            self._notify()
            return unit_id, emissions, wall

    # -- guest command surface ---------------------------------------------------

    def exec_in_guest(self, command: str) -> ExecResult:
        with self._lock:
            if self.state is not GuestState.RUNNING:
                raise GuestNotRunning(f"guest is {self.state.value}")
            self._sync()
            if self.state is not GuestState.RUNNING:
                raise GuestNotRunning(f"guest is {self.state.value}")
            op = command.strip().split()[0] if command.strip() else ""
            if op == "status":
                doc = {
                    "state": self.state.value,
                    "unit_id": self.machine.unit_id if self.machine else None,
                    "pc": self.machine.pc if self.machine else None,
                    "job_suspended": self.job_suspended,
                    "no_more_work": self.no_more_work,
                    "job_done": self.job_done_pending,
                    "address": self.address,
                }
                return ExecResult(0, json.dumps(doc, sort_keys=True))
            if op == "resources":
                return ExecResult(0, json.dumps(self._sample_locked().to_wire(),
                                                sort_keys=True))
            if op == "suspend":
                self.job_suspended = True
                self._notify()
                return ExecResult(0, "job suspended")
            if op == "resume":
                self.job_suspended = False
                self._last_sync_us = self._now_us()
                self._notify()
                return ExecResult(0, "job resumed")
            if op == "nomorework":
                self.no_more_work = True
                self._notify()
                return ExecResult(0, "work fetch disabled")
            if op == "allowmorework":
                self.no_more_work = False
                self._notify()
                return ExecResult(0, "work fetch enabled")
            if op == "update":
                self.update_requested = True
                self._notify()
                return ExecResult(0, "server exchange requested")
            if op == "reset":
                self.machine = None
                self.job_done_pending = False
                self.job_suspended = False
                self._notify()
                return ExecResult(0, "job state cleared")
            if op == "detach":
                self.detached = True
                self._notify()
                return ExecResult(0, "inner attachment ended")
            return ExecResult(1, f"unknown command {op!r}")

    # -- snapshots ------------------------------------------------------------

    def snapshot(self) -> SnapshotRecord:
        with self._lock:
            if self.state not in (GuestState.RUNNING, GuestState.PAUSED):
                raise SnapshotFailed(f"guest is {self.state.value}")
            self._sync()
            if self.state not in (GuestState.RUNNING, GuestState.PAUSED):
                raise SnapshotFailed(f"guest is {self.state.value}")
            disk_layers: dict[str, str] = {}
            layer_bytes: dict[str, int] = {}
            for disk in self.attached_disks:
                frozen_id = disk.freeze_and_branch()
                disk_layers[disk.disk_id] = frozen_id
                layer_bytes[disk.disk_id] = disk.layer(frozen_id).physical_size
            memory = None
            if self.machine is not None:
                memory = encode_memory_state(
                    self.machine,
                    {
                        "job_present": True,
                        "job_suspended": self.job_suspended,
                        "no_more_work": self.no_more_work,
                        "update_requested": self.update_requested,
                        "detached": self.detached,
                    },
                    self.backoff_attempt)
            self._snap_counter += 1
            wall_cost = self.config.snapshot_cost.cost(
                memory.size_bytes if memory else 0, sum(layer_bytes.values()))
            record = SnapshotRecord(
                snapshot_id=f"{self.guest_id}-snap-{self._snap_counter:04d}",
                settings_copy=copy.deepcopy(self.spec),
                disk_layers=disk_layers,
                memory_state=memory,
                created_at=self.clock.now(),
                wall_cost=wall_cost,
                layer_bytes=layer_bytes,
                unit_id=self.machine.unit_id if self.machine else None,
            )
            self._snapshots[record.snapshot_id] = record
            return record

    def adopt_snapshot(self, record: SnapshotRecord) -> None:
        """Re-register a record loaded from persistent session state."""
        with self._lock:
            self._snapshots[record.snapshot_id] = record

    def forget_snapshot(self, snapshot_id: str) -> None:
        with self._lock:
            self._snapshots.pop(snapshot_id, None)

    def restore(self, record: SnapshotRecord) -> None:
        with self._lock:
            known = self._snapshots.get(record.snapshot_id)
            if known is None:
                raise UnknownSnapshot(record.snapshot_id)
            disks_by_id = {d.disk_id: d for d in self.attached_disks}
            for disk_id, layer_id in record.disk_layers.items():
                disk = disks_by_id.get(disk_id)
                if disk is None:
                    raise UnknownSnapshot(f"disk {disk_id} is no longer attached")
                if layer_id not in {l.layer_id for l in disk.layers()}:
                    raise UnknownSnapshot(
                        f"layer {layer_id} of disk {disk_id} was pruned")
            self.spec = copy.deepcopy(record.settings_copy)
            for disk_id, layer_id in record.disk_layers.items():
                disks_by_id[disk_id].restore_to(layer_id)
            was_live = self.state in (GuestState.RUNNING, GuestState.PAUSED)
            if record.memory_state is not None:
                machine, flags, backoff = decode_memory_state(
                    record.memory_state, self.spec.memory_cap,
                    self.spec.exec_cap_percent, self.swap_capacity,
                    self._disk_regions(), self._disk_writer)
                self.machine = machine if flags["job_present"] else None
                self.job_suspended = flags["job_suspended"]
                self.no_more_work = flags["no_more_work"]
                self.update_requested = flags["update_requested"]
                self.detached = flags["detached"]
                self.backoff_attempt = backoff
                self.job_done_pending = machine.done if self.machine else False
                self.fault_reason = None
                self.exit_status = None
                # a live guest resumes instantly; a cold one holds the image
                # until start() resumes it
                self.state = GuestState.RUNNING if was_live else GuestState.SAVED
                if self.machine and self.job_started_at is None:
                    self.job_started_at = self.clock.now()
            else:
                self.machine = None
                self.job_done_pending = False
                self.fault_reason = None
                self.exit_status = None
                self.state = GuestState.REGISTERED
            self._exit_event = self.clock.new_event()
            self._last_sync_us = self._now_us()
            self._notify()

    # -- observation ----------------------------------------------------------

    def wait_for_exit(self, timeout: Optional[float] = None) -> tuple[GuestState, str]:
        """Blocks until the guest exits or faults; returns the final state and
        accumulated error text (empty when none)."""
        deadline = None if timeout is None else self.clock.now() + timeout
        while True:
            with self._lock:
                self._sync()
                if self.state in TERMINAL_STATES:
                    return self.state, "\n".join(self.captured_errors)
                target_us = self._projected_end_us()
                change = self._change
            wait_for = None
            if target_us is not None:
                wait_for = max(0.0, target_us / 1e6 - self.clock.now())
            if deadline is not None:
                remaining = deadline - self.clock.now()
                if remaining <= 0:
                    with self._lock:
                        return self.state, "\n".join(self.captured_errors)
                wait_for = remaining if wait_for is None else min(wait_for, remaining)
            change.wait(timeout=wait_for)

    def current_state(self) -> GuestState:
        with self._lock:
            self._sync()
            return self.state

    def job_finished(self) -> bool:
        with self._lock:
            self._sync()
            return self.job_done_pending

    def _sample_locked(self) -> ResourceSample:
        machine = self.machine
        return ResourceSample(
            timestamp=self.clock.now(),
            cpu_ticks_used=(machine.cpu_tick_hundredths // 100) if machine else 0,
            memory_in_use=machine.memory_high_water if machine else 0,
            disk_bytes_written=machine.disk_bytes_written if machine else 0,
        )

    def sample(self) -> ResourceSample:
        with self._lock:
            self._sync()
            return self._sample_locked()

    def trace(self) -> list[tuple]:
        with self._lock:
            self._sync()
            return list(self.machine.trace) if self.machine else []

    def emissions(self) -> list[tuple[str, bytes]]:
        with self._lock:
            self._sync()
            return list(self.machine.emissions) if self.machine else []


BACKENDS = {"sandbox": SandboxGuest}


class GuestRuntime:
    """Registers guests and allocates their simulated network identities."""

    def __init__(self, clock, config: Optional[RuntimeConfig] = None):
        self.clock = clock
        self.config = config or RuntimeConfig()
        if self.config.guest_backend not in BACKENDS:
            raise SpecInvalid(f"unknown guest backend {self.config.guest_backend!r}")
        self._counter = 0

    def register_guest(self, spec: GuestSpec, boot_disk: DiskImage) -> SandboxGuest:
        if not isinstance(spec, GuestSpec):
            raise SpecInvalid("spec must be a GuestSpec")
        self._counter += 1
        guest_id = f"guest-{self._counter:04d}"
        address = f"10.42.0.{self._counter}"
        backend = BACKENDS[self.config.guest_backend]
        guest = backend(guest_id, spec, self.clock, self.config, address)
        guest.attach_disk(boot_disk)
        return guest
