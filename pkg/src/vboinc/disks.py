"""Virtual disks: fixed/dynamic images with copy-on-write differencing chains.

A disk is a chain of layers.  Exactly one layer is writable (the active
layer); freezing it and branching a fresh child is the per-disk snapshot
primitive.  Reads resolve each block through the chain, nearest layer first;
blocks nobody ever wrote read as zeros.  Pruning deletes frozen layers that
no retained snapshot needs, first merging any blocks a surviving descendant
still resolves through them, so reads through kept layers never change.

Physical-size accounting is per layer: a preallocated layer (the base of a
fixed-size disk) always costs its full logical size; any other layer costs a
fixed metadata floor plus one block per materialized block.  Dynamic layers
never shrink when data is logically deleted; only pruning frees bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from .errors import FrozenLayer, InvalidGeometry, OutOfBounds, UnknownLayer

DEFAULT_BLOCK_SIZE = 4096
DEFAULT_METADATA_FLOOR = 8192

LAYER_MAGIC = b"VFLR"
LAYER_VERSION = 1
_LAYER_HEADER = struct.Struct("<4sHII")  # magic, version, block_size, block count
_BLOCK_INDEX = struct.Struct("<Q")


class DiskKind(str, Enum):
    FIXED = "fixed"
    DYNAMIC = "dynamic"


@dataclass
class DifferencingLayer:
    layer_id: str
    disk_id: str
    parent: Optional[str]
    block_size: int
    metadata_floor: int
    frozen: bool = False
    preallocated_bytes: int = 0
    blocks: dict[int, bytes] = field(default_factory=dict)

    @property
    def physical_size(self) -> int:
        if self.preallocated_bytes:
            return self.preallocated_bytes
        return self.metadata_floor + len(self.blocks) * self.block_size

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += _LAYER_HEADER.pack(LAYER_MAGIC, LAYER_VERSION, self.block_size,
                                  len(self.blocks))
        for index in sorted(self.blocks):
            out += _BLOCK_INDEX.pack(index)
            out += self.blocks[index]
        return bytes(out)

    def load_blocks(self, data: bytes) -> None:
        magic, version, block_size, count = _LAYER_HEADER.unpack_from(data, 0)
        if magic != LAYER_MAGIC or version != LAYER_VERSION:
            raise UnknownLayer(f"bad layer header for {self.layer_id}")
        if block_size != self.block_size:
            raise UnknownLayer(f"block size mismatch in layer {self.layer_id}")
        offset = _LAYER_HEADER.size
        record = _BLOCK_INDEX.size + block_size
        if len(data) != offset + count * record:
            raise UnknownLayer(f"truncated layer file for {self.layer_id}")
        for _ in range(count):
            (index,) = _BLOCK_INDEX.unpack_from(data, offset)
            offset += _BLOCK_INDEX.size
            self.blocks[index] = data[offset:offset + block_size]
            offset += block_size


class DiskImage:
    def __init__(self, disk_id: str, kind: DiskKind, logical_size: int,
                 block_size: int = DEFAULT_BLOCK_SIZE,
                 metadata_floor: int = DEFAULT_METADATA_FLOOR):
        if logical_size <= 0:
            raise InvalidGeometry("logical_size must be positive")
        if block_size <= 0 or block_size & (block_size - 1):
            raise InvalidGeometry("block_size must be a power of two")
        if logical_size % block_size:
            raise InvalidGeometry("block_size must divide logical_size")
        self.disk_id = disk_id
        self.kind = kind
        self.logical_size = logical_size
        self.block_size = block_size
        self.metadata_floor = metadata_floor
        self._layers: dict[str, DifferencingLayer] = {}
        self._counter = 0
        prealloc = logical_size if kind is DiskKind.FIXED else 0
        base = self._new_layer(parent=None, preallocated=prealloc)
        self.base_layer_id = base.layer_id
        self.active_layer_id = base.layer_id

    # -- structure ----------------------------------------------------------

    def _new_layer(self, parent: Optional[str], preallocated: int = 0) -> DifferencingLayer:
        layer_id = f"L{self._counter:04d}"
        self._counter += 1
        layer = DifferencingLayer(layer_id, self.disk_id, parent, self.block_size,
                                  self.metadata_floor, preallocated_bytes=preallocated)
        self._layers[layer_id] = layer
        return layer

    def layer(self, layer_id: str) -> DifferencingLayer:
        try:
            return self._layers[layer_id]
        except KeyError:
            raise UnknownLayer(f"{layer_id} is not a layer of disk {self.disk_id}") from None

    def layers(self) -> list[DifferencingLayer]:
        return list(self._layers.values())

    def chain(self, from_layer: Optional[str] = None) -> list[DifferencingLayer]:
        """Resolution path, nearest first, ending at the base layer."""
        out = []
        cursor: Optional[str] = from_layer or self.active_layer_id
        seen = set()
        while cursor is not None:
            if cursor in seen:
                raise UnknownLayer(f"cycle through {cursor} in disk {self.disk_id}")
            seen.add(cursor)
            layer = self.layer(cursor)
            out.append(layer)
            cursor = layer.parent
        return out

    @property
    def active_layer(self) -> DifferencingLayer:
        return self._layers[self.active_layer_id]

    @property
    def base_physical_size(self) -> int:
        return self._layers[self.base_layer_id].physical_size

    @property
    def physical_size(self) -> int:
        """Host bytes consumed by the disk file plus all live layer files."""
        return sum(layer.physical_size for layer in self._layers.values())

    # -- data path ------------------------------------------------------------

    def _resolve_block(self, index: int, from_layer: Optional[str] = None) -> bytes:
        for layer in self.chain(from_layer):
            block = layer.blocks.get(index)
            if block is not None:
                return block
        return b"\x00" * self.block_size

    def read_range(self, offset: int, length: int,
                   from_layer: Optional[str] = None) -> bytes:
        if offset < 0 or length < 0 or offset + length > self.logical_size:
            raise OutOfBounds(
                f"read [{offset}, {offset + length}) outside disk of {self.logical_size}")
        if length == 0:
            return b""
        out = bytearray()
        bs = self.block_size
        index = offset // bs
        within = offset % bs
        remaining = length
        while remaining > 0:
            block = self._resolve_block(index, from_layer)
            take = min(bs - within, remaining)
            out += block[within:within + take]
            remaining -= take
            within = 0
            index += 1
        return bytes(out)

    def write_range(self, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > self.logical_size:
            raise OutOfBounds(
                f"write [{offset}, {offset + len(data)}) outside disk of {self.logical_size}")
        active = self.active_layer
        if active.frozen:
            raise FrozenLayer(f"active layer {active.layer_id} is frozen")
        if not data:
            return
        bs = self.block_size
        index = offset // bs
        within = offset % bs
        pos = 0
        while pos < len(data):
            take = min(bs - within, len(data) - pos)
            chunk = data[pos:pos + take]
            if take == bs:
                active.blocks[index] = bytes(chunk)
            else:
                # copy-on-write: pull the parent's view before patching
                existing = active.blocks.get(index)
                if existing is None:
                    existing = self._resolve_block(index, active.parent)
                patched = bytearray(existing)
                patched[within:within + take] = chunk
                active.blocks[index] = bytes(patched)
            pos += take
            within = 0
            index += 1

    # -- snapshot primitives ---------------------------------------------------

    def freeze_and_branch(self) -> str:
        """Freeze the active layer and branch a fresh writable child;
        returns the frozen layer id (the per-disk snapshot artifact)."""
        frozen = self.active_layer
        frozen.frozen = True
        child = self._new_layer(parent=frozen.layer_id)
        self.active_layer_id = child.layer_id
        return frozen.layer_id

    def restore_to(self, layer_id: str) -> None:
        target = self.layer(layer_id)
        if not target.frozen:
            raise UnknownLayer(f"{layer_id} is not a frozen layer")
        if target.disk_id != self.disk_id:
            raise UnknownLayer(f"{layer_id} belongs to another disk")
        # the abandoned writable layer is not a snapshot; drop it outright
        old_active = self.active_layer
        if not old_active.frozen:
            del self._layers[old_active.layer_id]
        child = self._new_layer(parent=layer_id)
        self.active_layer_id = child.layer_id

    def prune_stale(self, keep: Iterable[str]) -> int:
        """Delete frozen layers not in `keep`, merging blocks still needed by
        surviving descendants.  Returns net bytes freed.  The base layer and
        the active layer always survive; reads through the active chain and
        every kept layer are unchanged."""
        keep_set = set(keep)
        for kid in keep_set:
            self.layer(kid)  # raises UnknownLayer for ids outside this chain
        survivors = keep_set | {self.base_layer_id, self.active_layer_id}
        candidates = [lid for lid, layer in self._layers.items()
                      if layer.frozen and lid not in survivors]
        if not candidates:
            return 0
        # delete children before parents so each merge sees final structure
        depth = {}

        def depth_of(lid: str) -> int:
            if lid not in depth:
                parent = self._layers[lid].parent
                depth[lid] = 0 if parent is None else depth_of(parent) + 1
            return depth[lid]

        freed = 0
        for lid in sorted(candidates, key=depth_of, reverse=True):
            victim = self._layers[lid]
            children = [l for l in self._layers.values() if l.parent == lid]
            freed += victim.physical_size
            for child in children:
                for index, block in victim.blocks.items():
                    if index not in child.blocks:
                        child.blocks[index] = block
                        freed -= self.block_size
                child.parent = victim.parent
            del self._layers[lid]
        return freed

    def check_invariants(self) -> None:
        """Structural health check used by tests after every operation."""
        active = self.active_layer
        assert not active.frozen, "active layer must be writable"
        writable = {l.layer_id for l in self._layers.values() if not l.frozen}
        assert writable == {active.layer_id}, f"extra writable layers: {writable}"
        self.chain()  # raises on cycles
        for layer in self._layers.values():
            if not layer.preallocated_bytes:
                assert layer.physical_size == \
                    self.metadata_floor + len(layer.blocks) * self.block_size

    # -- persistence --------------------------------------------------------------

    def save(self, directory: Path) -> None:
        """Write the manifest beside one file per layer under `snapshots/`."""
        directory = Path(directory)
        snapdir = directory / "snapshots"
        snapdir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "disk_id": self.disk_id,
            "kind": self.kind.value,
            "logical_size": self.logical_size,
            "block_size": self.block_size,
            "metadata_floor": self.metadata_floor,
            "counter": self._counter,
            "base": self.base_layer_id,
            "active": self.active_layer_id,
            "layers": [
                {
                    "layer_id": layer.layer_id,
                    "parent": layer.parent,
                    "frozen": layer.frozen,
                    "preallocated_bytes": layer.preallocated_bytes,
                }
                for layer in self._layers.values()
            ],
        }
        for layer in self._layers.values():
            path = snapdir / f"{self.disk_id}.{layer.layer_id}.layer"
            path.write_bytes(layer.to_bytes())
        (directory / f"{self.disk_id}.json").write_text(json.dumps(manifest, indent=1))
        # drop layer files for pruned layers
        live = {f"{self.disk_id}.{l.layer_id}.layer" for l in self._layers.values()}
        for stale in snapdir.glob(f"{self.disk_id}.*.layer"):
            if stale.name not in live:
                stale.unlink()

    @classmethod
    def load(cls, directory: Path, disk_id: str) -> "DiskImage":
        directory = Path(directory)
        manifest = json.loads((directory / f"{disk_id}.json").read_text())
        disk = cls.__new__(cls)
        disk.disk_id = manifest["disk_id"]
        disk.kind = DiskKind(manifest["kind"])
        disk.logical_size = manifest["logical_size"]
        disk.block_size = manifest["block_size"]
        disk.metadata_floor = manifest["metadata_floor"]
        disk._counter = manifest["counter"]
        disk.base_layer_id = manifest["base"]
        disk.active_layer_id = manifest["active"]
        disk._layers = {}
        for doc in manifest["layers"]:
            layer = DifferencingLayer(doc["layer_id"], disk.disk_id, doc["parent"],
                                      disk.block_size, disk.metadata_floor,
                                      frozen=doc["frozen"],
                                      preallocated_bytes=doc["preallocated_bytes"])
            data = (directory / "snapshots" /
                    f"{disk.disk_id}.{layer.layer_id}.layer").read_bytes()
            layer.load_blocks(data)
            disk._layers[layer.layer_id] = layer
        return disk


def create_disk(kind: DiskKind, logical_size: int,
                block_size: int = DEFAULT_BLOCK_SIZE,
                metadata_floor: int = DEFAULT_METADATA_FLOOR,
                disk_id: str = "disk") -> DiskImage:
    return DiskImage(disk_id, kind, logical_size, block_size, metadata_floor)


def disk_from_file(path: Path, disk_id: str,
                   block_size: int = DEFAULT_BLOCK_SIZE,
                   metadata_floor: int = DEFAULT_METADATA_FLOOR) -> DiskImage:
    """A fixed-size disk whose content is the given raw image file."""
    payload = Path(path).read_bytes()
    logical = max(block_size, -(-len(payload) // block_size) * block_size)
    disk = DiskImage(disk_id, DiskKind.FIXED, logical, block_size, metadata_floor)
    disk.write_range(0, payload)
    return disk
