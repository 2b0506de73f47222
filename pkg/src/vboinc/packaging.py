"""Guest image packaging: deterministic gzip'd tar archives with digests.

A package bundles the boot image file with its instantiation script (and,
for dependency disks, a manifest plus layer files).  Archive metadata is
normalized so packing the same content twice yields byte-identical archives;
the digest is the SHA-256 of the compressed stream and is verified before
any extraction.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import tarfile
from dataclasses import dataclass
from pathlib import Path

from .errors import CorruptArchive, DigestMismatch

IMAGE_MEMBER = "image.bin"
SCRIPT_MEMBER = "instantiate.sh"


@dataclass(frozen=True)
class ImagePackage:
    path: Path
    content_digest: str
    compressed_bytes: int
    uncompressed_bytes: int


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path, chunk: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def pack_files(members: dict[str, Path], out_path: Path) -> ImagePackage:
    """Tar the given files under their member names, gzip, record the digest."""
    out_path = Path(out_path)
    buffer = io.BytesIO()
    uncompressed = 0
    # mtime pinned to zero so archives are reproducible
    with gzip.GzipFile(fileobj=buffer, mode="wb", mtime=0) as gz:
        with tarfile.open(fileobj=gz, mode="w", format=tarfile.USTAR_FORMAT) as tar:
            for name in sorted(members):
                path = Path(members[name])
                info = tarfile.TarInfo(name=name)
                info.size = path.stat().st_size
                info.mtime = 0
                info.uid = info.gid = 0
                info.uname = info.gname = ""
                info.mode = 0o644
                uncompressed += info.size
                with open(path, "rb") as fh:
                    tar.addfile(info, fh)
    raw = buffer.getvalue()
    out_path.write_bytes(raw)
    return ImagePackage(out_path, sha256_hex(raw), len(raw), uncompressed)


def pack(image_path: Path, script_path: Path, out_path: Path) -> ImagePackage:
    return pack_files({IMAGE_MEMBER: Path(image_path), SCRIPT_MEMBER: Path(script_path)},
                      out_path)


def unpack_files(package_path: Path, dest_dir: Path,
                 expected_digest: str | None = None) -> dict[str, Path]:
    """Verify the digest, then extract every member into dest_dir."""
    package_path = Path(package_path)
    dest_dir = Path(dest_dir)
    raw = package_path.read_bytes()
    if expected_digest is not None and sha256_hex(raw) != expected_digest:
        raise DigestMismatch(
            f"package {package_path.name}: digest does not match descriptor")
    dest_dir.mkdir(parents=True, exist_ok=True)
    extracted: dict[str, Path] = {}
    try:
        with tarfile.open(fileobj=io.BytesIO(raw), mode="r:gz") as tar:
            for member in tar.getmembers():
                if not member.isfile() or member.name != Path(member.name).name:
                    raise CorruptArchive(f"unexpected member {member.name!r}")
                target = dest_dir / member.name
                src = tar.extractfile(member)
                assert src is not None
                target.write_bytes(src.read())
                extracted[member.name] = target
    except (tarfile.TarError, gzip.BadGzipFile, EOFError, OSError) as exc:
        raise CorruptArchive(f"cannot extract {package_path.name}: {exc}") from exc
    return extracted


def unpack(package_path: Path, dest_dir: Path,
           expected_digest: str | None = None) -> tuple[Path, Path]:
    members = unpack_files(package_path, dest_dir, expected_digest)
    try:
        return members[IMAGE_MEMBER], members[SCRIPT_MEMBER]
    except KeyError as exc:
        raise CorruptArchive(f"package misses member {exc}") from None


def export_depdisk_package(disk, out_path: Path) -> ImagePackage:
    """Serialize a dependency disk (manifest plus layer files) into a package."""
    import tempfile

    from .disks import DiskImage  # local import: avoid a module cycle

    assert isinstance(disk, DiskImage)
    with tempfile.TemporaryDirectory() as tmp:
        tmpdir = Path(tmp)
        disk.save(tmpdir)
        members = {f"{disk.disk_id}.json": tmpdir / f"{disk.disk_id}.json"}
        for layer_file in (tmpdir / "snapshots").glob(f"{disk.disk_id}.*.layer"):
            members[layer_file.name] = layer_file
        return pack_files(members, out_path)


def import_depdisk_package(package_path: Path, dest_dir: Path,
                           expected_digest: str | None = None):
    """Unpack a dependency-disk package and load the disk from it."""
    from .disks import DiskImage

    dest_dir = Path(dest_dir)
    members = unpack_files(package_path, dest_dir, expected_digest)
    manifest_names = [n for n in members if n.endswith(".json")]
    if len(manifest_names) != 1:
        raise CorruptArchive("dependency package must hold exactly one manifest")
    disk_id = manifest_names[0][:-len(".json")]
    snapdir = dest_dir / "snapshots"
    snapdir.mkdir(exist_ok=True)
    for name, path in members.items():
        if name.endswith(".layer"):
            path.replace(snapdir / name)
    return DiskImage.load(dest_dir, disk_id)


def make_reference_image(path: Path, logical_bytes: int = 4 * 1024 * 1024,
                         seed: str = "reference-image") -> Path:
    """Synthesize a boot-image blob: mostly sparse filesystem-like content
    (long zero runs with scattered metadata), so it compresses well."""
    path = Path(path)
    stripe = 64 * 1024
    digest_src = hashlib.sha256(seed.encode()).digest()
    with open(path, "wb") as fh:
        written = 0
        counter = 0
        while written < logical_bytes:
            header = hashlib.sha256(digest_src + counter.to_bytes(8, "little")).digest()
            block = (header + b"\x00" * (stripe - len(header)))[: logical_bytes - written]
            fh.write(block)
            written += len(block)
            counter += 1
    return path


def make_instantiation_script(image_member: str = IMAGE_MEMBER) -> str:
    """The executable helper shipped beside the image.  The client daemon
    interprets its two duties natively instead of shelling out."""
    return (
        "#!/bin/sh\n"
        f"# unpack the guest image and hand control back to the daemon\n"
        f"tar xzf \"$1\" {image_member}\n"
        "kill -USR1 \"$PPID\"\n"
    )
