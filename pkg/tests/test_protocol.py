"""Protocol types, backoff arithmetic, and the lifecycle state machine."""

import json
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vboinc.errors import IllegalTransition
from vboinc.protocol import (AttachmentRequest, BackoffPolicy, ClientPhase,
                             DepDiskDescriptor, ExitStatus, HostDescriptor,
                             ImageDescriptor, PHASE_EVENTS, ResultReport,
                             WorkUnit, advance_phase, legal_events,
                             next_backoff)

HOST = HostDescriptor("linux", "x86_64", 4 * 1024**3, 2)


# -- backoff -----------------------------------------------------------------

NO_JITTER = BackoffPolicy(base=1.0, factor=2.0, cap=256.0, jitter_fraction=0.0)


def test_backoff_attempt_zero_is_base():
    assert next_backoff(NO_JITTER, 0) == 1.0


def test_backoff_closed_form():
    # oracle: base * factor**attempt below the cap
    assert next_backoff(NO_JITTER, 3) == 8.0


def test_backoff_clips_to_cap():
    # 1 * 2**10 = 1024 clipped to 256
    assert next_backoff(NO_JITTER, 10) == 256.0


@given(st.integers(min_value=0, max_value=64), st.integers(min_value=0, max_value=64))
@settings(max_examples=60)
def test_backoff_monotone_and_capped(a, b):
    lo, hi = sorted((a, b))
    da, db = next_backoff(NO_JITTER, lo), next_backoff(NO_JITTER, hi)
    assert da <= db
    assert db <= NO_JITTER.cap


def test_backoff_no_overflow_for_huge_attempts():
    assert next_backoff(NO_JITTER, 100000) == 256.0


def test_backoff_jitter_stays_in_band():
    policy = BackoffPolicy(base=1.0, factor=2.0, cap=256.0, jitter_fraction=0.1)
    rng = random.Random(7)
    for attempt in range(12):
        raw = min(policy.base * policy.factor ** attempt, policy.cap)
        delay = next_backoff(policy, attempt, rng)
        assert raw * 0.9 <= delay <= raw * 1.1


def test_backoff_policy_validation():
    with pytest.raises(ValueError):
        BackoffPolicy(base=0)
    with pytest.raises(ValueError):
        BackoffPolicy(base=10.0, cap=1.0)
    with pytest.raises(ValueError):
        BackoffPolicy(jitter_fraction=1.0)


# -- state machine ---------------------------------------------------------------

def test_downloads_done_enters_instantiating():
    assert advance_phase(ClientPhase.DOWNLOADING, "downloads_done") \
        is ClientPhase.INSTANTIATING


def test_suspend_edge():
    assert advance_phase(ClientPhase.GUEST_RUNNING, "suspend") \
        is ClientPhase.GUEST_SUSPENDED


def test_illegal_transition_rejected():
    with pytest.raises(IllegalTransition):
        advance_phase(ClientPhase.DETACHED, "downloads_done")
    with pytest.raises(IllegalTransition):
        advance_phase(ClientPhase.GUEST_RUNNING, "not_an_event")


def test_replay_is_deterministic():
    sequence = ["attach_submitted", "probe_done", "downloads_done",
                "instantiated", "guest_started", "suspend", "resume"]

    def replay():
        phase = ClientPhase.DETACHED
        for event in sequence:
            phase = advance_phase(phase, event)
        return phase

    assert replay() is replay()
    assert replay() is ClientPhase.GUEST_RUNNING


def test_every_phase_reachable_within_eight_events():
    reached = {ClientPhase.DETACHED: 0}
    frontier = [ClientPhase.DETACHED]
    for depth in range(1, 9):
        new = []
        for phase in frontier:
            for event in PHASE_EVENTS:
                try:
                    nxt = advance_phase(phase, event)
                except IllegalTransition:
                    continue
                if nxt not in reached:
                    reached[nxt] = depth
                    new.append(nxt)
        frontier = new
    missing = set(ClientPhase) - set(reached) - {ClientPhase.FAILED}
    assert not missing, f"unreachable phases: {missing}"


def test_legal_events_matches_transition_table():
    assert "suspend" in legal_events(ClientPhase.GUEST_RUNNING)
    assert "suspend" not in legal_events(ClientPhase.DETACHED)


# -- wire codecs ------------------------------------------------------------------

def test_attachment_request_round_trip():
    req = AttachmentRequest("http://projects.example/alpha", "k-123", HOST)
    assert AttachmentRequest.from_wire(req.to_wire()) == req


def test_attachment_request_validation():
    with pytest.raises(ValueError):
        AttachmentRequest("not a url", "k", HOST)
    with pytest.raises(ValueError):
        AttachmentRequest("http://x.example", "", HOST)
    with pytest.raises(ValueError):
        HostDescriptor("linux", "x86_64", 0, 1)


def test_image_descriptor_round_trip_and_invariant():
    desc = ImageDescriptor("img-1", 207 * 2**20, 649 * 2**20, "ab" * 32, "script-1")
    assert ImageDescriptor.from_wire(desc.to_wire()) == desc
    with pytest.raises(ValueError):
        ImageDescriptor("img-1", 10, 5, "ab" * 32, "s")


def test_depdisk_descriptor_payload_presence():
    present = DepDiskDescriptor("dep-1", 8 * 2**30, "http://x.example", True)
    absent = DepDiskDescriptor(None, None, "http://x.example", False)
    assert DepDiskDescriptor.from_wire(present.to_wire()) == present
    assert DepDiskDescriptor.from_wire(absent.to_wire()) == absent
    assert "payload_bytes" not in absent.to_wire()
    with pytest.raises(ValueError):
        DepDiskDescriptor("dep-1", None, "http://x.example", True)


def test_work_unit_and_result_round_trip():
    unit = WorkUnit("u-1", "cpu 5\nemit out 10\n", 3600.0,
                    (("input", b"\x00\x01"),))
    assert WorkUnit.from_wire(json.loads(json.dumps(unit.to_wire()))) == unit
    report = ResultReport("u-1", (("out", b"\x99" * 10),), ExitStatus.ok(), 12.5)
    assert ResultReport.from_wire(report.to_wire()) == report
    err = ResultReport("u-1", (), ExitStatus.error("boom"), 0.5)
    assert ResultReport.from_wire(err.to_wire()) == err


def test_durations_are_integral_milliseconds_on_the_wire():
    unit = WorkUnit("u-1", "cpu 1\n", 1.2345, ())
    assert unit.to_wire()["deadline"] == 1234  # rounded to one part in 1000
    policy = BackoffPolicy()
    wire = policy.to_wire()
    assert isinstance(wire["base"], int) and isinstance(wire["cap"], int)


# -- cross-check with the dashboard's action table ---------------------------------

def _action_table():
    path = Path(__file__).resolve().parents[1] / "frontend" / "src" / "phase-actions.json"
    return json.loads(path.read_text())


def test_ui_transition_table_matches_state_machine():
    table = _action_table()["transitions"]
    for phase in ClientPhase:
        expected = {}
        for event in PHASE_EVENTS:
            try:
                expected[event] = advance_phase(phase, event).value
            except IllegalTransition:
                continue
        assert table[phase.value] == expected, f"mismatch for phase {phase.value}"


def test_ui_action_enablement_derives_from_transitions():
    doc = _action_table()
    actions = doc["actions_by_phase"]
    event_for_action = doc["action_events"]
    job_actions = set(doc["job_actions"])
    for phase in ClientPhase:
        enabled = set(actions[phase.value])
        for action, event in event_for_action.items():
            should = event in legal_events(phase)
            assert (action in enabled) == should, (phase, action)
        for action in job_actions:
            # job-level commands relay only while the guest runs
            assert (action in enabled) == (phase is ClientPhase.GUEST_RUNNING), \
                (phase, action)
