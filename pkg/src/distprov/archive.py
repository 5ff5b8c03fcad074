"""Two-layer package archive: an uncompressed outer tar of provenance
documents wrapping a gzipped inner tar of the project files.

Both tars are written byte-for-byte deterministically (ustar, sorted
entries, zeroed metadata, no record padding) so that identical inputs always
pack to identical bytes.
"""
from __future__ import annotations

import gzip
import os
import re
import tarfile
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .canonical import Digest, sha256
from .documents import DocumentError, PublisherSignature, RegistryAttestation
from .manifest import ManifestError, ProvenanceManifest, Source, check_relpath, compute_content_hash

PROVENANCE = "provenance.json"
SIGNATURE = "signature.json"
ATTESTATION = "registry_attestation.json"
CHECKSUM = "CHECKSUM"
CONTENTS = "contents.tar.gz"
ENTRY_ORDER = (PROVENANCE, SIGNATURE, ATTESTATION, CHECKSUM, CONTENTS)
UNPUBLISHED_ORDER = (PROVENANCE, SIGNATURE, CHECKSUM, CONTENTS)

BLOCK = 512
_ZERO_BLOCK = bytes(BLOCK)
_CHECKSUM_RE = re.compile(rb"([0-9a-f]{64})\n")
GZIP_LEVEL = 6

# instrumentation: how often inner archives were decompressed
stats: Counter = Counter()


class ArchiveError(Exception):
    code = "archive-error"


class MalformedEnvelope(ArchiveError):
    code = "malformed-envelope"


class ContentsCorrupt(ArchiveError):
    code = "gzip-corruption"


class PathEscape(ArchiveError):
    code = "path-escape"


class ChecksumMismatch(ArchiveError):
    code = "checksum-mismatch"


class DuplicateAttestation(ArchiveError):
    code = "duplicate-attestation"


# -- tar ---------------------------------------------------------------------


def _tar_member(name: str, data: bytes, mode: int = 0o644) -> bytes:
    try:
        encoded = name.encode("ascii")
    except UnicodeEncodeError:
        raise ArchiveError(f"tar entry names must be ASCII: {name!r}") from None
    if len(encoded) > 100:
        raise ArchiveError(f"tar entry name longer than 100 bytes: {name!r}")
    info = tarfile.TarInfo(name)
    info.size = len(data)
    info.mtime = 0
    info.mode = mode
    info.uid = info.gid = 0
    info.uname = info.gname = ""
    info.type = tarfile.REGTYPE
    header = info.tobuf(format=tarfile.USTAR_FORMAT, encoding="ascii", errors="strict")
    return header + data + bytes(-len(data) % BLOCK)


def write_tar(entries: Iterable[tuple[str, bytes]]) -> bytes:
    return b"".join(_tar_member(name, data) for name, data in entries) + _ZERO_BLOCK * 2


def read_tar(data: bytes) -> list[tuple[str, bytes]]:
    """Parse a tar of regular files.  Only zero blocks may follow the end marker."""
    entries = []
    offset = 0
    while True:
        if offset + BLOCK > len(data):
            raise ArchiveError("truncated tar archive")
        block = data[offset:offset + BLOCK]
        if block == _ZERO_BLOCK:
            tail = data[offset:]
            if len(tail) < 2 * BLOCK or tail.count(0) != len(tail):
                raise ArchiveError("data or missing end marker after end of tar archive")
            return entries
        try:
            info = tarfile.TarInfo.frombuf(block, "ascii", "strict")
        except (tarfile.HeaderError, UnicodeDecodeError) as exc:
            raise ArchiveError(f"bad tar header at offset {offset}: {exc}") from exc
        if info.type not in (tarfile.REGTYPE, tarfile.AREGTYPE):
            raise ArchiveError(f"unsupported tar entry type {info.type!r} for {info.name!r}")
        start = offset + BLOCK
        end = start + info.size
        if end > len(data):
            raise ArchiveError(f"truncated tar entry {info.name!r}")
        entries.append((info.name, data[start:end]))
        offset = end + (-info.size % BLOCK)


# -- checksum document ---------------------------------------------------------


def encode_checksum(digest: Digest) -> bytes:
    return digest.hex.encode("ascii") + b"\n"


def decode_checksum(raw: bytes) -> Digest:
    m = _CHECKSUM_RE.fullmatch(raw)
    if m is None:
        raise DocumentError("CHECKSUM must be 64 lowercase hex characters and a newline")
    return Digest(bytes.fromhex(m.group(1).decode("ascii")))


def decode_manifest(raw: bytes) -> ProvenanceManifest:
    from .canonical import CanonicalError, canonical_decode

    try:
        manifest = ProvenanceManifest.from_dict(canonical_decode(raw))
    except (CanonicalError, ManifestError, TypeError) as exc:
        raise DocumentError(f"provenance.json: {exc}") from exc
    if manifest.to_bytes() != raw:
        raise DocumentError("provenance.json: fields do not round-trip to the stored bytes")
    return manifest


# -- envelope --------------------------------------------------------------------


@dataclass(frozen=True)
class PackagedArtifact:
    manifest: ProvenanceManifest
    publisher_sig: PublisherSignature
    registry_attestation: Optional[RegistryAttestation]
    checksum: Digest
    contents: bytes = field(repr=False)
    raw: Mapping[str, bytes] = field(repr=False, default_factory=dict)

    @property
    def published(self) -> bool:
        return self.registry_attestation is not None

    def entries(self) -> list[tuple[str, bytes]]:
        return [(name, self.raw[name]) for name in ENTRY_ORDER if name in self.raw]

    def to_bytes(self) -> bytes:
        return write_tar(self.entries())


def _gzip(data: bytes) -> bytes:
    return gzip.compress(data, compresslevel=GZIP_LEVEL, mtime=0)


def _gunzip(data: bytes) -> bytes:
    stats["decompress"] += 1
    try:
        return gzip.decompress(data)
    except (OSError, EOFError, zlib.error) as exc:
        raise ContentsCorrupt(f"cannot decompress contents.tar.gz: {exc}") from exc


def build_contents(sources: Iterable[Source]) -> bytes:
    ordered = sorted(sources, key=lambda s: s[0].encode("utf-8"))
    return _gzip(write_tar(ordered))


def pack(manifest: ProvenanceManifest, publisher_sig: PublisherSignature, sources: Sequence[Source]) -> bytes:
    sources = list(sources)
    if not sources:
        raise ArchiveError("refusing to pack an empty source set")
    actual = {}
    for path, data in sources:
        check_relpath(path)
        if path in actual:
            raise ArchiveError(f"duplicate source path {path!r}")
        actual[path] = sha256(data)
    if actual != manifest.file_checksums:
        raise ChecksumMismatch("manifest file checksums do not match the sources being packed")
    if compute_content_hash(manifest.name, manifest.version, manifest.pkg_id, sources) != manifest.content_hash:
        raise ChecksumMismatch("manifest content_hash does not match the sources being packed")
    contents = build_contents(sources)
    return write_tar(
        [
            (PROVENANCE, manifest.to_bytes()),
            (SIGNATURE, publisher_sig.to_bytes()),
            (CHECKSUM, encode_checksum(sha256(contents))),
            (CONTENTS, contents),
        ]
    )


def read_raw_entries(data: bytes) -> dict[str, bytes]:
    """Outer entries by name, after checking the closed, fixed entry order."""
    try:
        entries = read_tar(data)
    except ArchiveError as exc:
        raise MalformedEnvelope(str(exc)) from exc
    names = tuple(name for name, _ in entries)
    if names not in (ENTRY_ORDER, UNPUBLISHED_ORDER):
        raise MalformedEnvelope(f"unexpected outer entries {list(names)}; expected {list(ENTRY_ORDER)}")
    return dict(entries)


def read_envelope(data: bytes) -> PackagedArtifact:
    """Parse the provenance envelope.  The inner archive is not decompressed."""
    raw = read_raw_entries(data)
    try:
        attestation = RegistryAttestation.from_bytes(raw[ATTESTATION]) if ATTESTATION in raw else None
        return PackagedArtifact(
            manifest=decode_manifest(raw[PROVENANCE]),
            publisher_sig=PublisherSignature.from_bytes(raw[SIGNATURE]),
            registry_attestation=attestation,
            checksum=decode_checksum(raw[CHECKSUM]),
            contents=raw[CONTENTS],
            raw=raw,
        )
    except DocumentError as exc:
        raise MalformedEnvelope(str(exc)) from exc


def unpack_contents(contents: bytes) -> list[Source]:
    try:
        entries = read_tar(_gunzip(contents))
    except ContentsCorrupt:
        raise
    except ArchiveError as exc:
        raise ContentsCorrupt(f"inner archive: {exc}") from exc
    seen = set()
    for name, _ in entries:
        try:
            check_relpath(name)
        except ManifestError as exc:
            raise PathEscape(str(exc)) from exc
        if name in seen:
            raise ArchiveError(f"duplicate inner entry {name!r}")
        seen.add(name)
    return entries


def extract_contents(
    artifact: PackagedArtifact,
    dest: Optional[os.PathLike | str] = None,
    *,
    checked: bool = False,
) -> list[Source]:
    """Decompress the inner archive, optionally writing the files under ``dest``."""
    if checked and sha256(artifact.contents) != artifact.checksum:
        raise ChecksumMismatch("contents.tar.gz does not match CHECKSUM")
    files = unpack_contents(artifact.contents)
    if dest is not None:
        root = Path(dest).resolve()
        for name, data in files:
            target = (root / name).resolve()
            if root not in target.parents:
                raise PathEscape(f"{name!r} escapes {root}")
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
    return files


def inject_attestation(data: bytes, attestation: RegistryAttestation | bytes) -> bytes:
    """Insert registry_attestation.json at its fixed slot; other entries stay byte-identical."""
    raw = read_raw_entries(data)
    if ATTESTATION in raw:
        raise DuplicateAttestation("artifact already carries a registry attestation")
    raw[ATTESTATION] = attestation if isinstance(attestation, bytes) else attestation.to_bytes()
    return write_tar([(name, raw[name]) for name in ENTRY_ORDER])
