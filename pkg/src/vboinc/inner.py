"""The work agent running in the guest's context.

It requests units with the guest's network identity, loads them into the
guest's job slot, and reports emissions back, honoring the job-level command
set (suspend/resume/nomorework/allowmorework/update/reset/detach) that the
host relays into the guest.  All agent-visible control state lives in the
guest (and therefore inside memory snapshots): a restore rewinds the agent
too, and a replayed result report is absorbed by the server's duplicate
detection.
"""

from __future__ import annotations

import random
from typing import Callable, Optional

from .errors import (ConnectFailure, DuplicateResult, TransportError,
                     UnknownUnit)
from .protocol import BackoffPolicy, ExitStatus, ResultReport, next_backoff
from .runtime import GuestState, TERMINAL_STATES
from .transport import Transport
from .workload import WorkloadProgram

POLL_INTERVAL = 0.25  # seconds between guest-state polls


class InnerAgent:
    def __init__(self, guest, transport: Transport, host_id: str, clock,
                 policy: Optional[BackoffPolicy] = None,
                 rng: Optional[random.Random] = None,
                 max_idle_exchanges: Optional[int] = None,
                 on_result_ack: Optional[Callable[[str], None]] = None):
        self.guest = guest
        self.transport = transport
        self.host_id = host_id
        self.clock = clock
        self.policy = policy or BackoffPolicy()
        self.rng = rng
        self.max_idle_exchanges = max_idle_exchanges
        self.on_result_ack = on_result_ack
        self.idle_streak = 0
        self.completed_units: list[str] = []

    # -- helpers -----------------------------------------------------------

    def _backoff_sleep(self) -> None:
        delay = next_backoff(self.policy, self.guest.backoff_attempt, self.rng)
        self.guest.backoff_attempt += 1
        self.clock.sleep(delay)

    def _reset_backoff(self) -> None:
        self.guest.backoff_attempt = 0

    def _report(self, unit_id: str, emissions: list, wall: float) -> bool:
        report = ResultReport(unit_id, tuple(emissions), ExitStatus.ok(), wall)
        while True:
            state = self.guest.current_state()
            if state in TERMINAL_STATES:
                return False
            if state is not GuestState.RUNNING:
                self.clock.sleep(POLL_INTERVAL)  # frozen with the guest
                continue
            try:
                self.transport.post_result(self.host_id, report)
                self._reset_backoff()
                return True
            except DuplicateResult:
                # a restore rewound the guest past an already-accepted report
                self._reset_backoff()
                return True
            except UnknownUnit:
                return False  # expired and reassigned; drop our copy
            except (ConnectFailure, TransportError):
                self._backoff_sleep()

    def _fetch_and_submit(self) -> None:
        guest = self.guest
        try:
            units = self.transport.fetch_work(self.host_id, slots=1)
        except (ConnectFailure, TransportError):
            self._backoff_sleep()
            return
        self._reset_backoff()
        if units:
            self.idle_streak = 0
            unit = units[0]
            guest.submit_job(unit.unit_id, WorkloadProgram.parse(unit.program))
        else:
            self.idle_streak += 1
            if (self.max_idle_exchanges is not None
                    and self.idle_streak >= self.max_idle_exchanges):
                guest.detached = True
                return
            self.clock.sleep(next_backoff(self.policy, self.idle_streak - 1,
                                          self.rng))

    # -- the agent loop -------------------------------------------------------

    def run(self) -> None:
        guest = self.guest
        while True:
            state = guest.current_state()
            if state in TERMINAL_STATES:
                return
            if state is not GuestState.RUNNING:
                # the whole guest is paused (or saved); the agent is frozen too
                self.clock.sleep(POLL_INTERVAL)
                continue
            if guest.detached:
                try:
                    guest.control("poweroff")
                except Exception:
                    pass
                return
            if guest.update_requested:
                guest.update_requested = False
                try:
                    self.transport.stats()
                    self._reset_backoff()
                except (ConnectFailure, TransportError):
                    self._backoff_sleep()
                continue
            if guest.job_finished():
                unit_id, emissions, wall = guest.collect_result()
                if self._report(unit_id, emissions, wall):
                    self.completed_units.append(unit_id)
                    if self.on_result_ack is not None:
                        self.on_result_ack(unit_id)
                continue
            if guest.machine is not None:
                # a job is loaded; idle here whether stepping or suspended
                self.clock.sleep(POLL_INTERVAL)
                continue
            if guest.no_more_work:
                self.clock.sleep(POLL_INTERVAL)
                continue
            self._fetch_and_submit()
