"""Independent reference models the implementation is checked against.

These deliberately use the dumbest possible strategies (full copies, flat
buffers) so they share no code with the structures under test.
"""

from __future__ import annotations


class FlatDiskOracle:
    """A disk as one flat bytearray; snapshots are full copies."""

    def __init__(self, logical_size: int):
        self.logical_size = logical_size
        self.buffer = bytearray(logical_size)
        self.snapshots: dict[str, bytes] = {}

    def write_range(self, offset: int, data: bytes) -> None:
        assert 0 <= offset and offset + len(data) <= self.logical_size
        self.buffer[offset:offset + len(data)] = data

    def read_range(self, offset: int, length: int) -> bytes:
        assert 0 <= offset and offset + length <= self.logical_size
        return bytes(self.buffer[offset:offset + length])

    def snapshot(self, tag: str) -> None:
        self.snapshots[tag] = bytes(self.buffer)

    def restore(self, tag: str) -> None:
        self.buffer = bytearray(self.snapshots[tag])

    def drop_snapshots(self, keep: set[str]) -> None:
        self.snapshots = {t: b for t, b in self.snapshots.items() if t in keep}
