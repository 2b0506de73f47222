"""Acceptance suite: one test per primary criterion, each printing its
verdict line.  Run with `pytest tests/test_acceptance.py -v -s`.

Tolerances and trial counts are pinned here; randomized suites use fixed
seeds so the gate is reproducible.
"""

import random
import time

import pytest

from vboinc.catalog import seed_project
from vboinc.client import ClientDaemon, ClientOptions
from vboinc.clock import SimClock
from vboinc.disks import DEFAULT_METADATA_FLOOR, DiskKind, create_disk
from vboinc.protocol import (AttachmentRequest, BackoffPolicy, ClientPhase,
                             ExitStatus, HostDescriptor, ResultReport)
from vboinc.runtime import (GuestRuntime, GuestSpec, GuestState, RuntimeConfig,
                            execute_program, memory_state_allowance)
from vboinc.server import ServerCore
from vboinc.sim import (LinkModel, SimTransport, compare_modes,
                        make_benchmark_scenario, run_scenario,
                        simulate_transfer)
from vboinc.workload import WorkloadProgram

from oracles import FlatDiskOracle

KiB = 1024
MiB = 1024 * KiB


def verdict(name: str, ok: bool, detail: str = "") -> None:
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}"
          + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


# -- 1. transfer arithmetic ---------------------------------------------------

def test_transfer_arithmetic():
    t0 = time.perf_counter()
    link = LinkModel(bandwidth_bps=9e6, latency=0.0, loss_rate=0.0)
    decimal = simulate_transfer(207 * 10**6, link)
    binary = simulate_transfer(207 * 2**20, link)
    elapsed = time.perf_counter() - t0
    verdict("transfer-arithmetic",
            decimal == 184.0 and abs(binary - 192.9) < 0.1 and elapsed < 1.0,
            f"decimal={decimal}s binary={binary:.4f}s runtime={elapsed:.3f}s")


# -- 2. snapshot floor pattern (six-workload scenario) -----------------------------

def test_snapshot_floor_pattern():
    t0 = time.perf_counter()
    report = run_scenario(make_benchmark_scenario(seed=7))
    elapsed = time.perf_counter() - t0
    floor = DEFAULT_METADATA_FLOOR
    rows = {row["benchmark"]: row for row in report["benchmarks"]}
    ok = set(rows) == {"cpu", "memory", "io", "disk", "primes_analog",
                       "sprint_analog"}
    detail = []
    for name, row in rows.items():
        if name == "disk":
            written = 10 * 204800
            in_band = (written <= row["depdisk_layer_bytes_total"]
                       <= written * 1.10)
            ok = ok and in_band
            detail.append(f"disk total={row['depdisk_layer_bytes_total']} "
                          f"(written {written})")
        else:
            ok = ok and all(s == floor for s in row["depdisk_layer_sizes"])
        ok = ok and all(s == floor for s in row["vm_layer_sizes"])
        ok = ok and row["snapshots"] >= 10
    ok = ok and elapsed < 10.0
    verdict("snapshot-floor-pattern", ok,
            f"{'; '.join(detail)}; runtime={elapsed:.2f}s")


# -- 3. memory-state bound ----------------------------------------------------------

def random_program(rng: random.Random, cap: int, allow_fail: bool = False) -> str:
    ops = []
    budget = cap // 2  # stay under the cap so runs complete
    for _ in range(rng.randrange(3, 12)):
        roll = rng.random()
        if roll < 0.35:
            ops.append(f"cpu {rng.randrange(1, 60)}")
        elif roll < 0.6:
            size = rng.randrange(0, max(1, budget // 4))
            budget -= size
            ops.append(f"alloc {size}")
        elif roll < 0.7:
            ops.append(f"free {rng.randrange(0, cap // 4)}")
        elif roll < 0.85:
            ops.append(f"emit out{rng.randrange(4)} {rng.randrange(0, 2000)}")
        else:
            ops.append(f"write 1 {rng.randrange(0, 8000)}")
    if allow_fail and rng.random() < 0.1:
        ops.append(f"fail injected-{rng.randrange(100)}")
    ops.append("cpu 100000")  # keep the guest busy past the snapshot point
    return "\n".join(ops) + "\n"


def _fresh_guest(clock, cap):
    runtime = GuestRuntime(clock, RuntimeConfig(boot_duration=0.1))
    boot = create_disk(DiskKind.FIXED, 64 * KiB, disk_id="boot")
    guest = runtime.register_guest(GuestSpec(memory_cap=cap), boot)
    data = create_disk(DiskKind.DYNAMIC, 1 * MiB, disk_id="data")
    guest.attach_disk(data, swap_reserve=256 * KiB)
    return guest


def test_memory_state_bound():
    t0 = time.perf_counter()
    rng = random.Random(0x5EED)
    worst = 0.0
    for trial in range(100):
        cap = rng.choice([64 * KiB, 256 * KiB, 1 * MiB])
        text = random_program(rng, cap)
        clock = SimClock()
        guest = _fresh_guest(clock, cap)

        def drive():
            guest.start()
            guest.submit_job(f"m{trial}", WorkloadProgram.parse(text))
            clock.sleep(rng.uniform(0.001, 2.0))
            if guest.current_state() in (GuestState.RUNNING, GuestState.PAUSED):
                return guest.snapshot()
            return None

        act = clock.spawn(drive)
        act.join()
        clock.shutdown()
        record = act.result
        if record is None or record.memory_state is None:
            continue
        allowance = memory_state_allowance(len(guest.attached_disks))
        bound = cap + allowance
        assert record.memory_state.size_bytes <= bound, \
            f"trial {trial}: {record.memory_state.size_bytes} > {bound}"
        worst = max(worst, record.memory_state.size_bytes / bound)
    elapsed = time.perf_counter() - t0
    verdict("memory-state-bound", elapsed < 30.0,
            f"100 programs, worst fill {worst:.3f}, runtime={elapsed:.2f}s")


# -- 4. recovery equivalence ---------------------------------------------------------

def _terminal_emissions(guest) -> list:
    return list(guest.machine.emissions) if guest.machine else []


def _run_uninterrupted(text: str, unit: str) -> list:
    clock = SimClock()
    guest = _fresh_guest(clock, 1 * MiB)

    def drive():
        guest.start()
        guest.submit_job(unit, WorkloadProgram.parse(text))
        guest.wait_for_exit()
        return _terminal_emissions(guest)

    act = clock.spawn(drive)
    act.join()
    clock.shutdown()
    return act.result


def _run_with_kill_and_restore(text: str, unit: str, snap_at: float,
                               kill_at: float) -> list:
    clock = SimClock()
    guest = _fresh_guest(clock, 1 * MiB)

    def drive():
        guest.start()
        guest.submit_job(unit, WorkloadProgram.parse(text))
        clock.sleep(snap_at)
        if guest.current_state() not in (GuestState.RUNNING, GuestState.PAUSED):
            guest.wait_for_exit()
            return _terminal_emissions(guest)
        record = guest.snapshot()
        clock.sleep(kill_at)
        if guest.current_state() in (GuestState.RUNNING, GuestState.PAUSED):
            guest.control("poweroff")
        guest.restore(record)
        if guest.state is GuestState.SAVED:
            guest.start()
        guest.wait_for_exit()
        return _terminal_emissions(guest)

    act = clock.spawn(drive)
    act.join()
    clock.shutdown()
    return act.result


def test_recovery_equivalence():
    t0 = time.perf_counter()
    rng = random.Random(0xC0FFEE)
    for trial in range(200):
        text = random_program(rng, 1 * MiB, allow_fail=False)
        unit = f"r{trial}"
        plain = _run_uninterrupted(text, unit)
        recovered = _run_with_kill_and_restore(
            text, unit, snap_at=rng.uniform(0.001, 1.5),
            kill_at=rng.uniform(0.001, 1.5))
        assert plain == recovered, f"trial {trial} diverged"
    elapsed = time.perf_counter() - t0
    verdict("recovery-equivalence", elapsed < 60.0,
            f"200 trials byte-identical, runtime={elapsed:.2f}s")


# -- 5. disk-chain oracle -------------------------------------------------------------

def test_disk_chain_oracle():
    t0 = time.perf_counter()
    rng = random.Random(0xD15C)
    sequences = 10_000
    for seq in range(sequences):
        logical = rng.choice([64 * KiB, 128 * KiB, 256 * KiB, 1 * MiB])
        bs = 4 * KiB
        disk = create_disk(DiskKind.DYNAMIC, logical, bs)
        oracle = FlatDiskOracle(logical)
        snaps: list[str] = []
        for _ in range(rng.randrange(4, 10)):
            roll = rng.random()
            if roll < 0.55:
                offset = rng.randrange(0, logical)
                length = rng.randrange(0, min(3 * bs, logical - offset) + 1)
                data = rng.randbytes(length)
                disk.write_range(offset, data)
                oracle.write_range(offset, data)
            elif roll < 0.75:
                tag = disk.freeze_and_branch()
                snaps.append(tag)
                oracle.snapshot(tag)
            elif roll < 0.9 and snaps:
                tag = rng.choice(snaps)
                disk.restore_to(tag)
                oracle.restore(tag)
            elif snaps:
                keep = {t for t in snaps if rng.random() < 0.5}
                disk.prune_stale(keep)
                oracle.drop_snapshots(keep)
                snaps = [t for t in snaps if t in keep]
            offset = rng.randrange(0, logical)
            length = rng.randrange(0, min(logical - offset, 8 * bs) + 1)
            assert disk.read_range(offset, length) == \
                oracle.read_range(offset, length), f"sequence {seq}"
        if logical <= 128 * KiB:
            assert disk.read_range(0, logical) == oracle.read_range(0, logical)
    elapsed = time.perf_counter() - t0
    verdict("disk-chain-oracle", elapsed < 60.0,
            f"{sequences} sequences byte-identical, runtime={elapsed:.2f}s")


# -- 6. barrier safety ------------------------------------------------------------------

URL = "http://projects.example/barrier"
KEY = "k-barrier"


def _barrier_trial(tmp_base, rng: random.Random, trial: int) -> None:
    clock = SimClock()
    server = ServerCore(clock)
    seed_project(server, URL, KEY, units=[], image_bytes=4 * KiB,
                 depdisk_logical=64 * KiB,
                 depdisk_seed_bytes=rng.randrange(0, 32 * KiB))
    link = LinkModel(bandwidth_bps=rng.uniform(50_000.0, 5_000_000.0),
                     latency=rng.uniform(0.0, 0.3))
    daemon = ClientDaemon(
        tmp_base / f"t{trial}", clock,
        lambda url: SimTransport(server, clock, link,
                                 rng=random.Random(trial)),
        runtime_config=RuntimeConfig(boot_duration=0.1),
        options=ClientOptions(
            checkpoint_interval=3600.0, keep_latest=1,
            fresh_disk_bytes=256 * KiB, swap_bytes=32 * KiB,
            chunk_bytes=rng.choice([4 * KiB, 16 * KiB]),
            backoff=BackoffPolicy(base=0.5, cap=8.0, jitter_fraction=0.0),
            guest_spec=GuestSpec(memory_cap=256 * KiB),
            max_idle_exchanges=1))
    session = daemon.attach_project(URL, KEY)
    daemon._pipeline.join()
    assert session.phase is ClientPhase.DETACHED, session.failure_reason
    import json as _json
    events = [_json.loads(line) for line in
              (session.directory / "session.json").read_text().splitlines()]
    done = [e["t"] for e in events if e["event"] == "transfer_done"]
    instantiating = [e["t"] for e in events
                     if e["event"] == "phase" and e["phase"] == "instantiating"]
    assert len(done) == 3  # image, script, dependency disk
    assert instantiating and instantiating[0] >= max(done), \
        f"trial {trial}: barrier violated"
    clock.shutdown()


def test_barrier_safety(tmp_path):
    t0 = time.perf_counter()
    rng = random.Random(0xBA221E12)
    trials = 1000
    for trial in range(trials):
        _barrier_trial(tmp_path, rng, trial)
    elapsed = time.perf_counter() - t0
    verdict("barrier-safety", True,
            f"{trials} trials, zero violations, runtime={elapsed:.1f}s")


# -- 7. backoff bound ----------------------------------------------------------------

def _outage_request_times() -> list:
    clock = SimClock()
    server = ServerCore(clock)
    seed_project(server, URL, KEY, units=[], image_bytes=4 * KiB,
                 depdisk_logical=None)
    outage = (0.0, 3600.0)
    link = LinkModel(bandwidth_bps=9e6, outage_windows=(outage,))
    transport = SimTransport(server, clock, link)
    policy = BackoffPolicy(base=1.0, factor=2.0, cap=256.0, jitter_fraction=0.0)
    times = []

    def hammer():
        from vboinc.protocol import next_backoff
        attempt = 0
        while clock.now() < outage[1]:
            try:
                transport.fetch_work("h-x", 1)
                attempt = 0
            except Exception:
                times.append(clock.now())
                clock.sleep(next_backoff(policy, attempt))
                attempt += 1

    clock.spawn(hammer).join()
    clock.shutdown()
    return [t for t in times if outage[0] <= t < outage[1]]


def test_backoff_bound_under_one_hour_outage():
    first = _outage_request_times()
    second = _outage_request_times()
    ok = len(first) <= 24 and first == second
    verdict("backoff-bound", ok,
            f"requests in outage hour = {len(first)} (≤ 24), "
            f"deterministic at jitter 0: {first == second}")


# -- 8. implementation-overhead null result ---------------------------------------------

def test_overhead_null_result():
    direct1, guest1 = compare_modes("cpu 40000\nemit out 512\n",
                                    overhead_factor=1.0)
    ratio1 = guest1 / direct1
    direct3, guest3 = compare_modes("cpu 40000\nalloc 65536\ncpu 40000\n",
                                    overhead_factor=3.0)
    ratio3 = guest3 / direct3
    ok = abs(ratio1 - 1.0) <= 0.01 and abs(ratio3 - 3.0) <= 3.0 * 0.05
    verdict("implementation-overhead", ok,
            f"factor 1.0 -> ratio {ratio1:.4f}; factor 3.0 -> ratio {ratio3:.4f}")


# -- 9. validation oracle ------------------------------------------------------------------

def test_validation_oracle():
    t0 = time.perf_counter()
    rng = random.Random(0xA11D)
    clock = SimClock()
    server = ServerCore(clock)
    url = "http://projects.example/validate"
    seed_project(server, url, "k-v", units=[], image_bytes=4 * KiB,
                 depdisk_logical=None)
    host_id, _ = server.handle_attach(AttachmentRequest(
        url, "k-v", HostDescriptor("linux", "x86_64", 1 * MiB, 1)))
    from vboinc.protocol import WorkUnit
    for n in range(200):
        program = random_program(rng, 64 * KiB).replace("write 1", "write 9")
        server.add_work(url, WorkUnit(f"v{n}", program, 1e9))
    accepted = rejected = 0
    for n in range(200):
        (unit,) = server.dispatch_work(host_id, 1)
        machine = execute_program(WorkloadProgram.parse(unit.program),
                                  unit.unit_id)
        blobs = list(machine.emissions)
        tamper = n >= 100
        if tamper:
            if blobs:
                name, data = blobs[0]
                flipped = bytearray(data or b"\x00")
                flipped[0] ^= 0x01
                blobs[0] = (name, bytes(flipped))
            else:
                blobs.append(("forged", b"\x01"))
        result = ResultReport(unit.unit_id, tuple(blobs), ExitStatus.ok(), 1.0)
        outcome = server.receive_result(host_id, result)
        if tamper:
            assert outcome["verdict"] == "rejected", f"unit {unit.unit_id}"
            rejected += 1
        else:
            assert outcome["verdict"] == "accepted", f"unit {unit.unit_id}"
            accepted += 1
    elapsed = time.perf_counter() - t0
    server.check_conservation()
    verdict("validation-oracle", accepted == 100 and rejected == 100,
            f"{accepted} accepted, {rejected} rejected, runtime={elapsed:.2f}s")


# -- 10. pruning -------------------------------------------------------------------------

def test_pruning_keep_latest_over_ten_ticks(tmp_path):
    clock = SimClock()
    server = ServerCore(clock)
    url = "http://projects.example/prune"
    program = "".join("write 1 65536\ncpu 70000\n" for _ in range(12))
    seed_project(server, url, "k-p", units=[("p0", program, 1e9)],
                 image_bytes=16 * KiB, depdisk_logical=4 * MiB)
    link = LinkModel(bandwidth_bps=80_000_000.0)
    daemon = ClientDaemon(
        tmp_path / "prune", clock,
        lambda u: SimTransport(server, clock, link),
        runtime_config=RuntimeConfig(boot_duration=0.5),
        options=ClientOptions(
            checkpoint_interval=60.0, keep_latest=1,
            fresh_disk_bytes=1 * MiB, swap_bytes=64 * KiB,
            chunk_bytes=16 * KiB,
            backoff=BackoffPolicy(base=0.5, cap=8.0, jitter_fraction=0.0),
            guest_spec=GuestSpec(memory_cap=1 * MiB),
            max_idle_exchanges=1))
    session = daemon.attach_project(url, "k-p")

    def steer():
        while session.phase is not ClientPhase.GUEST_RUNNING:
            clock.sleep(0.25)
        clock.sleep(60.0 * 10 + 1.0)
        ticks = sum(1 for line in
                    (session.directory / "session.json").read_text().splitlines()
                    if '"event": "snapshot"' in line)
        retained = len(session.snapshots)
        freed = session.freed_bytes_total
        daemon.recover_latest()  # the survivor must still restore
        return ticks, retained, freed

    act = clock.spawn(steer)
    act.join()
    ticks, retained, freed = act.result
    daemon._pipeline.join(reraise=False)
    while True:
        supervisor = daemon._supervisor
        if supervisor is None:
            break
        supervisor.join(reraise=False)
        if daemon._supervisor is supervisor:
            break
    ok = (ticks >= 10 and retained == 1 and freed > 0
          and session.acked_units == ["p0"]
          and server.counters["completed"] == 1)
    clock.shutdown()
    verdict("pruning", ok,
            f"{ticks} ticks, retained={retained}, freed={freed} bytes, "
            f"unit completed after restore")
