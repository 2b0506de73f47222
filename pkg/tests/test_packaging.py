"""Image packaging: deterministic archives, digest gating, round trips."""

import pytest

from vboinc.errors import CorruptArchive, DigestMismatch
from vboinc.packaging import (make_instantiation_script, make_reference_image,
                              pack, sha256_file, unpack)


@pytest.fixture
def sample_files(tmp_path):
    image = tmp_path / "image.raw"
    image.write_bytes(bytes(range(256)) * 512)
    script = tmp_path / "inst.sh"
    script.write_text(make_instantiation_script())
    return image, script


def test_pack_unpack_round_trip(sample_files, tmp_path):
    image, script = sample_files
    package = pack(image, script, tmp_path / "bundle.tgz")
    out_image, out_script = unpack(package.path, tmp_path / "out",
                                   expected_digest=package.content_digest)
    assert out_image.read_bytes() == image.read_bytes()
    assert out_script.read_bytes() == script.read_bytes()


def test_packing_is_reproducible(sample_files, tmp_path):
    image, script = sample_files
    one = pack(image, script, tmp_path / "a.tgz")
    two = pack(image, script, tmp_path / "b.tgz")
    assert one.content_digest == two.content_digest
    assert (tmp_path / "a.tgz").read_bytes() == (tmp_path / "b.tgz").read_bytes()


def test_tampered_archive_fails_digest(sample_files, tmp_path):
    image, script = sample_files
    package = pack(image, script, tmp_path / "bundle.tgz")
    raw = bytearray(package.path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    package.path.write_bytes(bytes(raw))
    with pytest.raises(DigestMismatch):
        unpack(package.path, tmp_path / "out", expected_digest=package.content_digest)


def test_garbage_archive_is_corrupt(tmp_path):
    bogus = tmp_path / "bogus.tgz"
    bogus.write_bytes(b"this is not a gzip stream at all")
    with pytest.raises(CorruptArchive):
        unpack(bogus, tmp_path / "out")


def test_reference_image_compresses_strictly(tmp_path):
    image = make_reference_image(tmp_path / "ref.img", logical_bytes=4 * 1024 * 1024)
    script = tmp_path / "inst.sh"
    script.write_text(make_instantiation_script())
    package = pack(image, script, tmp_path / "ref.tgz")
    assert package.compressed_bytes < package.uncompressed_bytes
    assert package.uncompressed_bytes >= 4 * 1024 * 1024


def test_digest_matches_compressed_stream(sample_files, tmp_path):
    image, script = sample_files
    package = pack(image, script, tmp_path / "bundle.tgz")
    assert sha256_file(package.path) == package.content_digest
