"""Wall-clock and virtual-clock schedulers with a common interface.

All long-running orchestration code in this package (transfers, guest
supervision, checkpoint timers, retry loops) is written against the small
Clock interface below: ``now()``, ``sleep()``, ``spawn()``, ``new_event()``.
The daemon binds it to :class:`WallClock`; the simulation harness binds it to
:class:`SimClock`, which advances a virtual clock deterministically with no
real sleeping.

SimClock runs each activity on a real thread but hands out a single
execution baton: exactly one simulated thread runs at any moment, and the
next runnable thread is always the one with the earliest (time, sequence)
wakeup.  Identical programs therefore produce identical event orders on
every run.  The one rule callers must obey: never hold an external lock
across a clock wait.
"""

from __future__ import annotations

import heapq
import threading
import time
from typing import Callable, Optional

from .errors import SimDeadlock, SimulationAborted


class Activity:
    """Handle for a spawned activity; join() re-raises its failure by default."""

    def __init__(self, name: str, done_event: "EventLike"):
        self.name = name
        self._done = done_event
        self.result = None
        self.exception: Optional[BaseException] = None

    def join(self, timeout: Optional[float] = None, reraise: bool = True):
        finished = self._done.wait(timeout)
        if finished and reraise and self.exception is not None:
            raise self.exception
        return finished

    @property
    def finished(self) -> bool:
        return self._done.is_set()


class EventLike:
    def wait(self, timeout: Optional[float] = None) -> bool:
        raise NotImplementedError

    def set(self) -> None:
        raise NotImplementedError

    def is_set(self) -> bool:
        raise NotImplementedError


# --------------------------------------------------------------------------
# Wall clock


class WallEvent(EventLike):
    def __init__(self):
        self._ev = threading.Event()

    def wait(self, timeout=None):
        return self._ev.wait(timeout)

    def set(self):
        self._ev.set()

    def is_set(self):
        return self._ev.is_set()


class WallClock:
    """Real time; activities are plain daemon threads."""

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, duration: float) -> None:
        if duration > 0:
            time.sleep(duration)

    def new_event(self) -> WallEvent:
        return WallEvent()

    def spawn(self, fn: Callable[[], object], name: str = "activity") -> Activity:
        done = WallEvent()
        act = Activity(name, done)

        def body():
            try:
                act.result = fn()
            except BaseException as exc:  # captured for join()
                act.exception = exc
            finally:
                done.set()

        threading.Thread(target=body, name=name, daemon=True).start()
        return act


# --------------------------------------------------------------------------
# Simulated clock


class _Park:
    """One blocking point of one simulated thread; woken at most once."""

    __slots__ = ("event", "woken", "abort")

    def __init__(self):
        self.event = threading.Event()
        self.woken = False
        self.abort: Optional[BaseException] = None


class SimEvent(EventLike):
    def __init__(self, clock: "SimClock"):
        self._clock = clock
        self._flag = False
        self._waiters: list[_Park] = []
        self._real = threading.Event()  # post-abort fallback only

    def is_set(self) -> bool:
        return self._flag

    def set(self) -> None:
        clock = self._clock
        with clock._mu:
            if self._flag:
                return
            self._flag = True
            self._real.set()
            for park in self._waiters:
                if not park.woken:
                    clock._schedule_locked(clock._now, park)
            self._waiters.clear()

    def wait(self, timeout: Optional[float] = None) -> bool:
        clock = self._clock
        with clock._mu:
            if self._flag:
                return True
            if clock._aborted is not None:
                aborted = True
            else:
                aborted = False
                park = _Park()
                self._waiters.append(park)
                deadline = None if timeout is None else clock._now + timeout
        if aborted:
            # the clock no longer dispatches; unwinding threads still set()
            # their completion events in real time
            self._real.wait(timeout=5.0)
            return self._flag
        clock._park(park, deadline)
        return self._flag


class SimClock:
    """Deterministic virtual clock driven by its participating threads.

    The thread that constructs the clock is automatically a participant.
    A horizon (maximum simulated time) may be set; advancing past it aborts
    every activity with :class:`SimulationAborted`.
    """

    def __init__(self, start: float = 0.0, horizon: Optional[float] = None):
        self._now = float(start)
        self.horizon = horizon
        self._mu = threading.Lock()
        self._heap: list[tuple[float, int, _Park]] = []
        self._seq = 0
        self._running = 1  # the constructing thread
        self._parked: set[_Park] = set()
        self._aborted: Optional[BaseException] = None

    # -- public interface ---------------------------------------------------

    def now(self) -> float:
        return self._now

    def sleep(self, duration: float) -> None:
        with self._mu:
            self._check_abort_locked()
            park = _Park()
            deadline = self._now + max(0.0, duration)
        self._park(park, deadline)

    def new_event(self) -> SimEvent:
        return SimEvent(self)

    def shutdown(self) -> None:
        """Abort every parked activity so their threads unwind.

        For tests and scenario teardown: activities still waiting on virtual
        timers or events raise :class:`SimulationAborted` and exit.
        """
        with self._mu:
            if self._aborted is None:
                self._abort_all_locked(SimDeadlock("clock shut down"))

    def spawn(self, fn: Callable[[], object], name: str = "activity") -> Activity:
        done = SimEvent(self)
        act = Activity(name, done)
        start_park = _Park()

        def body():
            start_park.event.wait()
            with self._mu:
                self._running += 1
                self._parked.discard(start_park)
            if start_park.abort is not None:
                done.set()  # pragma: no cover - abort before first run
                self._finish()
                return
            try:
                act.result = fn()
            except BaseException as exc:
                act.exception = exc
            finally:
                done.set()
                self._finish()

        with self._mu:
            self._check_abort_locked()
            self._parked.add(start_park)
            self._schedule_locked(self._now, start_park)
        threading.Thread(target=body, name=name, daemon=True).start()
        return act

    # -- scheduler internals --------------------------------------------------

    def _check_abort_locked(self):
        if self._aborted is not None:
            raise SimulationAborted(str(self._aborted))

    def _schedule_locked(self, when: float, park: _Park) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (when, self._seq, park))

    def _park(self, park: _Park, deadline: Optional[float]) -> None:
        with self._mu:
            self._parked.add(park)
            if deadline is not None:
                self._schedule_locked(deadline, park)
            self._running -= 1
            if self._running == 0:
                self._dispatch_locked()
        park.event.wait()
        with self._mu:
            self._running += 1
            self._parked.discard(park)
        if park.abort is not None:
            raise SimulationAborted(str(park.abort)) from park.abort

    def _finish(self) -> None:
        with self._mu:
            self._running -= 1
            if self._running == 0:
                self._dispatch_locked()

    def _dispatch_locked(self) -> None:
        while self._heap:
            when, _seq, park = heapq.heappop(self._heap)
            if park.woken:
                continue  # stale entry (event fired before timeout or vice versa)
            if self.horizon is not None and when > self.horizon:
                heapq.heappush(self._heap, (when, _seq, park))
                self._abort_all_locked(SimDeadlock(
                    f"horizon {self.horizon}s exceeded (next wakeup at {when}s)"))
                return
            if when > self._now:
                self._now = when
            park.woken = True
            park.event.set()
            return
        if self._parked:
            self._abort_all_locked(SimDeadlock(
                "all simulated activities are blocked and no timer is pending"))

    def _abort_all_locked(self, cause: BaseException) -> None:
        self._aborted = cause
        for park in list(self._parked):
            if not park.woken:
                park.woken = True
                park.abort = cause
                park.event.set()
