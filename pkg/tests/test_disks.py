"""Disk model: geometry, copy-on-write chains, snapshots, pruning, persistence."""

import random

import pytest

from vboinc.disks import (DEFAULT_METADATA_FLOOR, DiskImage, DiskKind,
                          create_disk)
from vboinc.errors import (FrozenLayer, InvalidGeometry, OutOfBounds,
                           UnknownLayer)

from oracles import FlatDiskOracle

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB
FLOOR = DEFAULT_METADATA_FLOOR


def test_dynamic_disk_starts_at_metadata_floor():
    disk = create_disk(DiskKind.DYNAMIC, 8 * GiB, 4 * KiB)
    assert disk.physical_size == FLOOR


def test_fixed_disk_preallocates():
    disk = create_disk(DiskKind.FIXED, 1 * MiB, 4 * KiB)
    assert disk.physical_size == 1 * MiB
    assert disk.base_physical_size == 1 * MiB


def test_dynamic_disk_unchanged_without_writes():
    disk = create_disk(DiskKind.DYNAMIC, 1 * MiB, 4 * KiB)
    disk.write_range(0, b"")
    assert disk.physical_size == FLOOR


@pytest.mark.parametrize("kind,size,bs", [
    (DiskKind.DYNAMIC, 0, 4096),
    (DiskKind.DYNAMIC, -4096, 4096),
    (DiskKind.DYNAMIC, 8192, 3000),   # not a power of two
    (DiskKind.DYNAMIC, 10000, 4096),  # block size does not divide
])
def test_invalid_geometry(kind, size, bs):
    with pytest.raises(InvalidGeometry):
        create_disk(kind, size, bs)


def test_write_materializes_blocks_in_active_layer_only():
    disk = create_disk(DiskKind.DYNAMIC, 1 * MiB, 4 * KiB)
    disk.write_range(0, b"\xaa" * 4 * KiB)
    assert disk.physical_size == FLOOR + 4 * KiB
    assert len(disk.active_layer.blocks) == 1


def test_partial_write_copies_parent_block_up():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    disk.write_range(0, b"\xaa" * 8 * KiB)
    disk.freeze_and_branch()
    # one byte spanning into block 1, which only the parent materializes
    disk.write_range(4 * KiB + 100, b"\x55")
    expected = bytearray(b"\xaa" * 8 * KiB)
    expected[4 * KiB + 100] = 0x55
    assert disk.read_range(0, 8 * KiB) == bytes(expected)
    # block 0 untouched: still only in the frozen parent
    assert 0 not in disk.active_layer.blocks
    assert 1 in disk.active_layer.blocks


def test_write_at_end_is_out_of_bounds():
    disk = create_disk(DiskKind.DYNAMIC, 1 * MiB, 4 * KiB)
    with pytest.raises(OutOfBounds):
        disk.write_range(1 * MiB, b"\x01")
    with pytest.raises(OutOfBounds):
        disk.read_range(1 * MiB - 1, 2)


def test_write_to_manually_frozen_layer_rejected():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    disk.active_layer.frozen = True
    with pytest.raises(FrozenLayer):
        disk.write_range(0, b"\x01")


def test_fresh_disk_reads_zero():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    assert disk.read_range(10, 1000) == b"\x00" * 1000


def test_snapshot_then_overwrite_then_restore():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    x = b"\x11" * 8 * KiB
    y = b"\x22" * 8 * KiB
    disk.write_range(0, x)
    snap = disk.freeze_and_branch()
    disk.write_range(0, y)
    assert disk.read_range(0, 8 * KiB) == y
    disk.restore_to(snap)
    assert disk.read_range(0, 8 * KiB) == x


def test_three_layer_chain_merges_disjoint_writes():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    disk.write_range(0, b"\x01" * 4 * KiB)
    disk.freeze_and_branch()
    disk.write_range(8 * KiB, b"\x02" * 4 * KiB)
    disk.freeze_and_branch()
    disk.write_range(16 * KiB, b"\x03" * 4 * KiB)
    got = disk.read_range(0, 20 * KiB)
    assert got[:4 * KiB] == b"\x01" * 4 * KiB
    assert got[4 * KiB:8 * KiB] == b"\x00" * 4 * KiB
    assert got[8 * KiB:12 * KiB] == b"\x02" * 4 * KiB
    assert got[16 * KiB:20 * KiB] == b"\x03" * 4 * KiB


def test_freeze_without_writes_is_floor_sized():
    disk = create_disk(DiskKind.DYNAMIC, 1 * MiB, 4 * KiB)
    disk.write_range(0, b"\x09" * 4 * KiB)
    disk.freeze_and_branch()
    snap = disk.freeze_and_branch()
    assert disk.layer(snap).physical_size == FLOOR


def test_freeze_after_bulk_writes_sizes_with_data():
    disk = create_disk(DiskKind.DYNAMIC, 4 * MiB, 4 * KiB)
    payload = 53 * 16 * KiB  # stand-in for a large dependency write burst
    disk.write_range(0, b"\x42" * payload)
    snap = disk.freeze_and_branch()
    assert disk.layer(snap).physical_size == payload + FLOOR


def test_two_consecutive_freezes_extend_chain_by_two():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    before = len(disk.chain())
    disk.freeze_and_branch()
    disk.freeze_and_branch()
    assert len(disk.chain()) == before + 2


def test_restore_to_base_yields_zeros():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    disk.write_range(0, b"\x07" * 4 * KiB)
    base = disk.freeze_and_branch()  # freeze the base layer itself
    disk.write_range(0, b"\x08" * 4 * KiB)
    fresh = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    first = fresh.freeze_and_branch()
    fresh.restore_to(first)
    assert fresh.read_range(0, 4 * KiB) == b"\x00" * 4 * KiB
    disk.restore_to(base)
    assert disk.read_range(0, 4 * KiB) == b"\x07" * 4 * KiB


def test_restore_to_foreign_layer_rejected():
    a = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB, disk_id="a")
    b = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB, disk_id="b")
    snap = a.freeze_and_branch()
    with pytest.raises(UnknownLayer):
        b.restore_to(snap + "zz")
    b.freeze_and_branch()
    with pytest.raises(UnknownLayer):
        b.restore_to("L9999")


def test_restore_to_unfrozen_layer_rejected():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    with pytest.raises(UnknownLayer):
        disk.restore_to(disk.active_layer_id)


def test_prune_merges_kept_descendants():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    disk.freeze_and_branch()  # seal the (never-prunable) base layer
    disk.write_range(0, b"\x01" * 4 * KiB)
    s1 = disk.freeze_and_branch()
    disk.write_range(8 * KiB, b"\x02" * 4 * KiB)
    s2 = disk.freeze_and_branch()
    disk.write_range(16 * KiB, b"\x03" * 4 * KiB)
    before = disk.read_range(0, 20 * KiB)
    freed = disk.prune_stale(keep={s2})
    assert freed > 0
    assert s1 not in {l.layer_id for l in disk.layers()}
    assert disk.read_range(0, 20 * KiB) == before
    disk.restore_to(s2)
    got = disk.read_range(0, 12 * KiB)
    assert got[:4 * KiB] == b"\x01" * 4 * KiB
    assert got[8 * KiB:] == b"\x02" * 4 * KiB
    disk.check_invariants()


def test_prune_keep_all_frees_nothing():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    disk.write_range(0, b"\x01" * 4 * KiB)
    s1 = disk.freeze_and_branch()
    s2 = disk.freeze_and_branch()
    assert disk.prune_stale(keep={s1, s2}) == 0


def test_prune_empty_keep_frees_abandoned_branches():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    disk.freeze_and_branch()  # seal the base layer
    disk.write_range(0, b"\x01" * 4 * KiB)
    s1 = disk.freeze_and_branch()
    disk.write_range(8 * KiB, b"\x02" * 4 * KiB)
    s2 = disk.freeze_and_branch()
    disk.restore_to(s1)  # s2 becomes an off-chain branch
    disk.write_range(16 * KiB, b"\x03" * 4 * KiB)
    before = disk.read_range(0, 20 * KiB)
    freed = disk.prune_stale(keep=set())
    assert freed > 0
    remaining = {l.layer_id for l in disk.layers()}
    assert s2 not in remaining and s1 not in remaining
    assert disk.read_range(0, 20 * KiB) == before
    disk.check_invariants()


def test_fixed_base_size_constant_across_operations():
    disk = create_disk(DiskKind.FIXED, 256 * KiB, 4 * KiB)
    assert disk.base_physical_size == 256 * KiB
    disk.write_range(0, b"\x01" * 64 * KiB)
    assert disk.base_physical_size == 256 * KiB
    disk.freeze_and_branch()
    disk.write_range(0, b"\x02" * 4 * KiB)
    assert disk.base_physical_size == 256 * KiB


def test_dynamic_physical_size_nondecreasing_except_prune():
    disk = create_disk(DiskKind.DYNAMIC, 256 * KiB, 4 * KiB)
    sizes = [disk.physical_size]
    disk.write_range(0, b"\x01" * 16 * KiB)
    sizes.append(disk.physical_size)
    disk.freeze_and_branch()
    sizes.append(disk.physical_size)
    disk.write_range(0, b"\x00" * 16 * KiB)  # logical deletion: zero-fill
    sizes.append(disk.physical_size)
    assert sizes == sorted(sizes)


def _random_ops_trial(rng: random.Random, ops: int, logical: int, bs: int) -> None:
    disk = create_disk(DiskKind.DYNAMIC, logical, bs)
    oracle = FlatDiskOracle(logical)
    snaps: list[str] = []
    for _ in range(ops):
        action = rng.random()
        if action < 0.55:
            offset = rng.randrange(0, logical)
            length = rng.randrange(0, min(3 * bs, logical - offset) + 1)
            data = rng.randbytes(length)
            disk.write_range(offset, data)
            oracle.write_range(offset, data)
        elif action < 0.75:
            tag = disk.freeze_and_branch()
            snaps.append(tag)
            oracle.snapshot(tag)
        elif action < 0.9 and snaps:
            tag = rng.choice(snaps)
            disk.restore_to(tag)
            oracle.restore(tag)
        elif snaps:
            keep = {t for t in snaps if rng.random() < 0.5}
            disk.prune_stale(keep)
            oracle.drop_snapshots(keep)
            snaps = [t for t in snaps if t in keep]
        offset = rng.randrange(0, logical)
        length = rng.randrange(0, logical - offset + 1)
        assert disk.read_range(offset, length) == oracle.read_range(offset, length)
        disk.check_invariants()
    assert disk.read_range(0, logical) == oracle.read_range(0, logical)


def test_flat_buffer_equivalence_randomized():
    rng = random.Random(0xD15C)
    for _ in range(20):
        _random_ops_trial(rng, ops=40, logical=64 * KiB, bs=4 * KiB)


def test_layer_file_round_trip(tmp_path):
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB, disk_id="d0")
    disk.write_range(0, b"\x42" * 10 * KiB)
    disk.freeze_and_branch()
    disk.write_range(20 * KiB, b"\x43" * 4 * KiB)
    disk.save(tmp_path)
    loaded = DiskImage.load(tmp_path, "d0")
    assert loaded.read_range(0, 64 * KiB) == disk.read_range(0, 64 * KiB)
    assert loaded.physical_size == disk.physical_size
    loaded.check_invariants()


def test_layer_file_binary_format():
    disk = create_disk(DiskKind.DYNAMIC, 64 * KiB, 4 * KiB)
    disk.write_range(4 * KiB, b"\x01" * 4 * KiB)
    raw = disk.active_layer.to_bytes()
    assert raw[:4] == b"VFLR"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert int.from_bytes(raw[6:10], "little") == 4 * KiB
    assert int.from_bytes(raw[10:14], "little") == 1
    assert int.from_bytes(raw[14:22], "little") == 1  # block index
