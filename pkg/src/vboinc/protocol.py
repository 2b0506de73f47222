"""Wire-visible data model, client lifecycle state machine, request backoff.

All values here are immutable and safe to share between activities.  The
canonical message encoding is UTF-8 JSON with the field names used by the
dataclasses; durations and instants travel as integral milliseconds, blob
payloads as base64, digests as lowercase hex SHA-256.
"""

from __future__ import annotations

import base64
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional
from urllib.parse import urlparse

from .errors import IllegalTransition

DIGEST_LEN = 64  # hex chars of sha-256


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


def valid_url(url: str) -> bool:
    parsed = urlparse(url)
    return bool(parsed.scheme) and bool(parsed.netloc)


def to_ms(seconds: float) -> int:
    return int(round(seconds * 1000.0))


def from_ms(ms: int) -> float:
    return ms / 1000.0


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


# --------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class HostDescriptor:
    os_tag: str
    arch_tag: str
    memory_bytes: int
    cpu_count: int

    def __post_init__(self):
        _require(self.memory_bytes > 0, "memory_bytes must be positive")
        _require(self.cpu_count >= 1, "cpu_count must be at least 1")

    def to_wire(self) -> dict:
        return {
            "os_tag": self.os_tag,
            "arch_tag": self.arch_tag,
            "memory_bytes": self.memory_bytes,
            "cpu_count": self.cpu_count,
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "HostDescriptor":
        return cls(doc["os_tag"], doc["arch_tag"], int(doc["memory_bytes"]),
                   int(doc["cpu_count"]))


@dataclass(frozen=True)
class AttachmentRequest:
    project_url: str
    weak_account_key: str
    host_descriptor: HostDescriptor

    def __post_init__(self):
        _require(bool(self.project_url) and valid_url(self.project_url),
                 f"project_url invalid: {self.project_url!r}")
        _require(bool(self.weak_account_key), "weak_account_key must be non-empty")

    def to_wire(self) -> dict:
        return {
            "project_url": self.project_url,
            "weak_account_key": self.weak_account_key,
            "host_descriptor": self.host_descriptor.to_wire(),
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "AttachmentRequest":
        return cls(doc["project_url"], doc["weak_account_key"],
                   HostDescriptor.from_wire(doc["host_descriptor"]))


@dataclass(frozen=True)
class ImageDescriptor:
    image_id: str
    payload_bytes_compressed: int
    payload_bytes_uncompressed: int
    content_digest: str
    instantiation_script_id: str

    def __post_init__(self):
        _require(self.payload_bytes_compressed <= self.payload_bytes_uncompressed,
                 "compressed payload larger than uncompressed")
        _require(len(self.content_digest) == DIGEST_LEN,
                 "content_digest must be hex sha-256")

    def to_wire(self) -> dict:
        return {
            "image_id": self.image_id,
            "payload_bytes_compressed": self.payload_bytes_compressed,
            "payload_bytes_uncompressed": self.payload_bytes_uncompressed,
            "content_digest": self.content_digest,
            "instantiation_script_id": self.instantiation_script_id,
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "ImageDescriptor":
        return cls(doc["image_id"], int(doc["payload_bytes_compressed"]),
                   int(doc["payload_bytes_uncompressed"]), doc["content_digest"],
                   doc["instantiation_script_id"])


@dataclass(frozen=True)
class DepDiskDescriptor:
    disk_id: Optional[str]
    payload_bytes: Optional[int]
    project_url: str
    present: bool

    def __post_init__(self):
        has_payload = self.disk_id is not None and self.payload_bytes is not None
        _require(self.present == has_payload,
                 "present must match payload field presence")

    def to_wire(self) -> dict:
        doc: dict = {"project_url": self.project_url, "present": self.present}
        if self.present:
            doc["disk_id"] = self.disk_id
            doc["payload_bytes"] = self.payload_bytes
        return doc

    @classmethod
    def from_wire(cls, doc: dict) -> "DepDiskDescriptor":
        if doc["present"]:
            return cls(doc["disk_id"], int(doc["payload_bytes"]),
                       doc["project_url"], True)
        return cls(None, None, doc["project_url"], False)


@dataclass(frozen=True)
class WorkUnit:
    unit_id: str
    program: str
    deadline: float  # simulated-time instant, seconds
    input_blobs: tuple = ()

    def to_wire(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "program": self.program,
            "deadline": to_ms(self.deadline),
            "input_blobs": [{"name": n, "data": b64(d)} for n, d in self.input_blobs],
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "WorkUnit":
        blobs = tuple((b["name"], unb64(b["data"])) for b in doc.get("input_blobs", []))
        return cls(doc["unit_id"], doc["program"], from_ms(int(doc["deadline"])), blobs)


class ExitKind(str, Enum):
    OK = "ok"
    ERROR = "error"


@dataclass(frozen=True)
class ExitStatus:
    kind: ExitKind
    detail: str = ""

    @classmethod
    def ok(cls) -> "ExitStatus":
        return cls(ExitKind.OK)

    @classmethod
    def error(cls, detail: str) -> "ExitStatus":
        return cls(ExitKind.ERROR, detail)

    def to_wire(self) -> dict:
        doc: dict = {"status": self.kind.value}
        if self.kind is ExitKind.ERROR:
            doc["detail"] = self.detail
        return doc

    @classmethod
    def from_wire(cls, doc: dict) -> "ExitStatus":
        kind = ExitKind(doc["status"])
        return cls(kind, doc.get("detail", ""))


@dataclass(frozen=True)
class ResultReport:
    unit_id: str
    output_blobs: tuple
    exit_status: ExitStatus
    host_wall_time: float  # seconds

    def to_wire(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "output_blobs": [{"name": n, "data": b64(d)} for n, d in self.output_blobs],
            "exit_status": self.exit_status.to_wire(),
            "host_wall_time": to_ms(self.host_wall_time),
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "ResultReport":
        blobs = tuple((b["name"], unb64(b["data"])) for b in doc.get("output_blobs", []))
        return cls(doc["unit_id"], blobs, ExitStatus.from_wire(doc["exit_status"]),
                   from_ms(int(doc["host_wall_time"])))


# --------------------------------------------------------------------------
# Backoff


@dataclass(frozen=True)
class BackoffPolicy:
    base: float = 1.0  # seconds
    factor: float = 2.0
    cap: float = 256.0
    jitter_fraction: float = 0.1

    def __post_init__(self):
        _require(self.base > 0, "base must be positive")
        _require(self.cap >= self.base, "cap must be at least base")
        _require(self.factor > 1, "factor must exceed 1")
        _require(0 <= self.jitter_fraction < 1, "jitter_fraction must be in [0,1)")

    def to_wire(self) -> dict:
        return {
            "base": to_ms(self.base),
            "factor": self.factor,
            "cap": to_ms(self.cap),
            "jitter_fraction": self.jitter_fraction,
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "BackoffPolicy":
        return cls(from_ms(int(doc["base"])), float(doc["factor"]),
                   from_ms(int(doc["cap"])), float(doc["jitter_fraction"]))


def next_backoff(policy: BackoffPolicy, attempt: int,
                 rng: Optional[random.Random] = None) -> float:
    """Delay before retry number `attempt` (0-based): min(base·factor^a, cap),
    widened by ±jitter_fraction uniformly when jitter is enabled."""
    if attempt < 0:
        raise ValueError("attempt must be non-negative")
    # guard factor**attempt against float overflow for absurd attempt counts
    if attempt * math.log(policy.factor) >= math.log(policy.cap / policy.base):
        delay = policy.cap
    else:
        delay = min(policy.base * policy.factor ** attempt, policy.cap)
    if policy.jitter_fraction > 0:
        rng = rng if rng is not None else random
        delay *= 1.0 + rng.uniform(-policy.jitter_fraction, policy.jitter_fraction)
    return delay


# --------------------------------------------------------------------------
# Client lifecycle state machine


class ClientPhase(str, Enum):
    DETACHED = "detached"
    PROBING = "probing"
    DOWNLOADING = "downloading"
    INSTANTIATING = "instantiating"
    GUEST_RUNNING = "guest_running"
    GUEST_SUSPENDED = "guest_suspended"
    RECOVERING = "recovering"
    FAILED = "failed"


PHASE_EVENTS = (
    "attach_submitted",
    "probe_done",
    "downloads_done",
    "instantiated",
    "guest_started",
    "suspend",
    "resume",
    "guest_exit_ok",
    "guest_error",
    "recovery_started",
    "recovery_done",
)

_P = ClientPhase
_TRANSITIONS: dict[tuple[ClientPhase, str], ClientPhase] = {
    (_P.DETACHED, "attach_submitted"): _P.PROBING,
    (_P.FAILED, "attach_submitted"): _P.PROBING,
    (_P.PROBING, "probe_done"): _P.DOWNLOADING,
    (_P.DOWNLOADING, "downloads_done"): _P.INSTANTIATING,
    # unpack/register finished but the guest is not yet started
    (_P.INSTANTIATING, "instantiated"): _P.INSTANTIATING,
    (_P.INSTANTIATING, "guest_started"): _P.GUEST_RUNNING,
    (_P.GUEST_RUNNING, "suspend"): _P.GUEST_SUSPENDED,
    (_P.GUEST_SUSPENDED, "resume"): _P.GUEST_RUNNING,
    (_P.GUEST_RUNNING, "guest_exit_ok"): _P.DETACHED,
    (_P.GUEST_SUSPENDED, "guest_exit_ok"): _P.DETACHED,
    (_P.GUEST_RUNNING, "recovery_started"): _P.RECOVERING,
    (_P.GUEST_SUSPENDED, "recovery_started"): _P.RECOVERING,
    (_P.FAILED, "recovery_started"): _P.RECOVERING,
    (_P.DETACHED, "recovery_started"): _P.RECOVERING,
    (_P.RECOVERING, "recovery_done"): _P.GUEST_RUNNING,
}
# any failure during an active phase lands in FAILED
for _phase in (_P.PROBING, _P.DOWNLOADING, _P.INSTANTIATING, _P.GUEST_RUNNING,
               _P.GUEST_SUSPENDED, _P.RECOVERING):
    _TRANSITIONS[(_phase, "guest_error")] = _P.FAILED


def advance_phase(current: ClientPhase, event: str) -> ClientPhase:
    """Successor phase for `event`, or IllegalTransition if no such edge."""
    if event not in PHASE_EVENTS:
        raise IllegalTransition(current, event)
    try:
        return _TRANSITIONS[(current, event)]
    except KeyError:
        raise IllegalTransition(current, event) from None


def legal_events(current: ClientPhase) -> frozenset[str]:
    return frozenset(ev for (phase, ev) in _TRANSITIONS if phase is current)
