"""Exception taxonomy shared across the package."""


class VBoincError(Exception):
    """Base class for all errors raised by this package."""


# --- protocol ---

class IllegalTransition(VBoincError):
    def __init__(self, current, event):
        super().__init__(f"no transition from {current!r} on {event!r}")
        self.current = current
        self.event = event


# --- workload language ---

class WorkloadParseError(VBoincError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


# --- disk model ---

class InvalidGeometry(VBoincError):
    pass


class OutOfBounds(VBoincError):
    pass


class FrozenLayer(VBoincError):
    pass


class UnknownLayer(VBoincError):
    pass


# --- packaging ---

class DigestMismatch(VBoincError):
    pass


class CorruptArchive(VBoincError):
    pass


# --- guest runtime ---

class SpecInvalid(VBoincError):
    pass


class NoDiskAttached(VBoincError):
    pass


class BootTimeout(VBoincError):
    pass


class IllegalControl(VBoincError):
    pass


class GuestNotRunning(VBoincError):
    pass


class UnknownCommand(VBoincError):
    pass


class SnapshotFailed(VBoincError):
    pass


class SnapshotCorrupt(VBoincError):
    pass


class UnknownSnapshot(VBoincError):
    pass


class DiskBusy(VBoincError):
    pass


class NotAttached(VBoincError):
    pass


# --- server ---

class UnknownKey(VBoincError):
    pass


class UnknownProject(VBoincError):
    pass


class UnknownHost(VBoincError):
    pass


class UnknownUnit(VBoincError):
    pass


class UnknownBlob(VBoincError):
    pass


class DuplicateResult(VBoincError):
    pass


class BadRange(VBoincError):
    pass


# --- client / transport ---

class TransportError(VBoincError):
    """A server exchange failed; the caller may retry under backoff."""


class ConnectFailure(TransportError):
    pass


class TransferFailed(VBoincError):
    def __init__(self, blob_id: str, reason: str):
        super().__init__(f"transfer of {blob_id} failed: {reason}")
        self.blob_id = blob_id


class NoSnapshot(VBoincError):
    pass


# --- simulation harness ---

class ScenarioInvalid(VBoincError):
    pass


class HorizonExceeded(VBoincError):
    pass


class NeverCompletes(VBoincError):
    pass


class IoFailure(VBoincError):
    pass


class SimDeadlock(RuntimeError):
    """Every simulated activity is blocked and no timer is pending."""


class SimulationAborted(BaseException):
    """Raised inside simulated activities when the clock aborts (horizon or
    deadlock).  Derives from BaseException so ordinary error handling in
    client code does not swallow it."""
