"""Canned project assembly: builds the image package, instantiation script,
and optional dependency disk a project needs before it can serve clients.
Used by the server's seed command, the simulation harness, and tests."""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Optional

from .disks import DiskKind, create_disk
from .packaging import (export_depdisk_package, make_instantiation_script,
                        make_reference_image, pack)
from .protocol import WorkUnit
from .server import ServerCore

KiB = 1024
MiB = 1024 * KiB


def build_project_payloads(image_bytes: int = 256 * KiB,
                           depdisk_logical: Optional[int] = 16 * MiB,
                           depdisk_seed_bytes: int = 0) -> dict:
    """Assemble the byte payloads a project registration needs.

    depdisk_logical None means the project ships no dependency disk; a
    positive depdisk_seed_bytes pre-populates the disk with content so
    transfers and snapshots have data to carry."""
    with tempfile.TemporaryDirectory() as tmp:
        tmpdir = Path(tmp)
        image_file = make_reference_image(tmpdir / "image.raw", image_bytes)
        script_file = tmpdir / "instantiate.sh"
        script_file.write_text(make_instantiation_script())
        package = pack(image_file, script_file, tmpdir / "image-package.tgz")
        payloads = {
            "image_package": package.path.read_bytes(),
            "image_uncompressed": package.uncompressed_bytes,
            "script": script_file.read_bytes(),
            "depdisk_package": None,
        }
        if depdisk_logical is not None:
            disk = create_disk(DiskKind.DYNAMIC, depdisk_logical, disk_id="depdisk")
            if depdisk_seed_bytes:
                seed = min(depdisk_seed_bytes, depdisk_logical)
                disk.write_range(0, b"\xd5" * seed)
            dep = export_depdisk_package(disk, tmpdir / "depdisk-package.tgz")
            payloads["depdisk_package"] = dep.path.read_bytes()
        return payloads


def seed_project(core: ServerCore, project_url: str, weak_key: str,
                 units: Optional[list[tuple[str, str, float]]] = None,
                 image_bytes: int = 256 * KiB,
                 depdisk_logical: Optional[int] = 16 * MiB,
                 depdisk_seed_bytes: int = 0,
                 validation_mode: str = "recompute") -> None:
    """Register a ready-to-serve project: key, payloads, and work units
    given as (unit_id, program text, deadline) triples."""
    payloads = build_project_payloads(image_bytes, depdisk_logical,
                                      depdisk_seed_bytes)
    core.register_key(weak_key)
    core.register_project(
        project_url,
        image_package=payloads["image_package"],
        image_uncompressed=payloads["image_uncompressed"],
        script=payloads["script"],
        depdisk_package=payloads["depdisk_package"],
        validation_mode=validation_mode,
    )
    for unit_id, program, deadline in units or []:
        core.add_work(project_url, WorkUnit(unit_id, program, deadline))
