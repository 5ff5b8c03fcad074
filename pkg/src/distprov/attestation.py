"""Publisher signing, registry identity and key rotation, and the
countersigning publish pipeline."""
from __future__ import annotations

import hmac
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from ._time import parse_time, utc_now
from .archive import (
    ArchiveError,
    PackagedArtifact,
    extract_contents,
    inject_attestation,
    pack,
    read_envelope,
)
from .canonical import Digest, canonical_decode, canonical_encode, sha256
from .documents import (
    Attestation,
    KeyPeriod,
    PublisherSignature,
    RegistryAttestation,
    RegistryIdentityDoc,
)
from .identity import (
    KeyPair,
    PublisherIdentity,
    _atomic_write,
    decode_public_key,
    default_publisher_id,
    encode_public_key,
    fingerprint,
    generate_keypair,
    verify,
)
from .manifest import ManifestError, ProvenanceManifest, Source, build_manifest, check_namespace, compute_content_hash, load_project

logger = logging.getLogger(__name__)

ScanHook = Callable[[ProvenanceManifest, Sequence[Source]], bool]


# -- publisher side ----------------------------------------------------------------


def sign_manifest(manifest: ProvenanceManifest, publisher: PublisherIdentity) -> PublisherSignature:
    return PublisherSignature(
        signature=publisher.key_pair.sign(manifest.to_bytes()),
        publisher_fingerprint=publisher.fingerprint,
        publisher_id=publisher.publisher_id,
        signed_at=manifest.build.timestamp,
    )


def verify_publisher_signature(manifest_bytes: bytes, sig: PublisherSignature, public_key: bytes) -> bool:
    return fingerprint(public_key) == sig.publisher_fingerprint and verify(public_key, manifest_bytes, sig.signature)


def package_project(
    root: os.PathLike | str,
    publisher: PublisherIdentity,
    **manifest_options,
) -> bytes:
    """Build, sign and pack a project directory.  Needs no registry."""
    project = load_project(root)
    manifest = build_manifest(project, **manifest_options)
    return pack(manifest, sign_manifest(manifest, publisher), project.sources)


# -- registry identity -----------------------------------------------------------


class NoKeyActive(LookupError):
    pass


@dataclass(frozen=True)
class RegistryIdentity:
    """A registry's identity document together with its current private key."""

    doc: RegistryIdentityDoc
    key_pair: KeyPair = field(repr=False)

    def __post_init__(self) -> None:
        if self.key_pair.public_key != self.doc.public_key:
            raise ValueError("key pair does not match the identity document")

    @property
    def fingerprint(self) -> Digest:
        return self.doc.key_fingerprint

    def rotate(self, new_key: KeyPair, rotation_time: Optional[str] = None) -> "RegistryIdentity":
        return RegistryIdentity(rotate_key(self.doc, new_key, rotation_time or utc_now()), new_key)


def registry_init(
    registry_id: str,
    url: str,
    namespaces: Iterable[str],
    parent: Optional[str] = None,
    *,
    key_pair: Optional[KeyPair] = None,
    now: Optional[str] = None,
) -> RegistryIdentity:
    try:
        namespaces = tuple(check_namespace(ns) for ns in namespaces)
    except ManifestError as exc:
        raise ValueError(str(exc)) from exc
    if len(set(namespaces)) != len(namespaces):
        raise ValueError("duplicate namespace in registry claim")
    key_pair = key_pair or generate_keypair()
    doc = RegistryIdentityDoc(
        registry_id=registry_id,
        registry_url=url,
        public_key=key_pair.public_key,
        key_fingerprint=key_pair.fingerprint,
        namespaces=namespaces,
        parent_registry=parent,
        key_valid_from=now or utc_now(),
    )
    return RegistryIdentity(doc, key_pair)


def rotate_key(doc: RegistryIdentityDoc, new_key: KeyPair | bytes, rotation_time: str) -> RegistryIdentityDoc:
    public_key = new_key.public_key if isinstance(new_key, KeyPair) else new_key
    if parse_time(rotation_time) < parse_time(doc.key_valid_from):
        raise ValueError(f"rotation time {rotation_time} precedes current key validity {doc.key_valid_from}")
    if public_key == doc.public_key:
        raise ValueError("new key is the current key")
    retired = KeyPeriod(doc.public_key, doc.key_fingerprint, doc.key_valid_from, rotation_time)
    rotated = replace(
        doc,
        public_key=public_key,
        key_fingerprint=fingerprint(public_key),
        key_valid_from=rotation_time,
        key_rotation_history=doc.key_rotation_history + (retired,),
    )
    rotated.check()
    return rotated


def active_key_at(doc: RegistryIdentityDoc, time: str) -> bytes:
    """The key valid at ``time``; periods include their start and exclude their end."""
    t = parse_time(time)
    if t >= parse_time(doc.key_valid_from):
        return doc.public_key
    for period in doc.key_rotation_history:
        if parse_time(period.valid_from) <= t < parse_time(period.valid_until):
            return period.public_key
    raise NoKeyActive(f"no registry key of {doc.registry_id} was active at {time}")


@dataclass(frozen=True)
class Problem:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


def verify_attestation(
    attested: RegistryAttestation,
    doc: RegistryIdentityDoc,
    *,
    manifest_hash: Optional[Digest] = None,
    publisher_sig: Optional[PublisherSignature] = None,
    clock_skew: int = 0,
) -> tuple[bool, list[Problem]]:
    """Check sigma_R with the key active at acceptance time, plus the
    manifest binding and temporal order when those inputs are given."""
    a = attested.attestation
    problems: list[Problem] = []
    try:
        key = active_key_at(doc, a.accepted_at)
    except (NoKeyActive, ValueError) as exc:
        problems.append(Problem("no-key-active", str(exc)))
    else:
        if fingerprint(key) != a.registry_fingerprint:
            problems.append(Problem("fingerprint-mismatch", f"attestation names {a.registry_fingerprint}, key active then is {fingerprint(key)}"))
        if not verify(key, a.to_bytes(), attested.signature):
            problems.append(Problem("bad-registry-signature", "registry signature does not verify"))
    if a.registry_id != doc.registry_id:
        problems.append(Problem("registry-id-mismatch", f"attested by {a.registry_id!r}, document is {doc.registry_id!r}"))
    if manifest_hash is not None and a.manifest_hash != manifest_hash:
        problems.append(Problem("manifest-hash-mismatch", "attestation covers a different provenance manifest"))
    if publisher_sig is not None:
        try:
            lag = (parse_time(a.accepted_at) - parse_time(publisher_sig.signed_at)).total_seconds()
        except ValueError as exc:
            problems.append(Problem("temporal-order", str(exc)))
        else:
            if lag < -clock_skew:
                problems.append(Problem("temporal-order", f"accepted at {a.accepted_at}, before publisher signed at {publisher_sig.signed_at}"))
    return not problems, problems


# -- publisher directory ---------------------------------------------------------


@dataclass(frozen=True)
class PublisherRecord:
    publisher_id: str
    public_key: bytes
    namespaces: tuple[str, ...]
    token_hash: Optional[Digest] = None

    @property
    def fingerprint(self) -> Digest:
        return fingerprint(self.public_key)

    def to_dict(self) -> dict:
        return {
            "namespaces": list(self.namespaces),
            "public_key": encode_public_key(self.public_key),
            "publisher_id": self.publisher_id,
            "token_hash": None if self.token_hash is None else str(self.token_hash),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PublisherRecord":
        token = d.get("token_hash")
        return cls(d["publisher_id"], decode_public_key(d["public_key"]), tuple(d["namespaces"]), Digest.parse(token) if token else None)


class PublisherDirectory:
    """Which publisher keys may publish into which namespaces."""

    def __init__(self, records: Iterable[PublisherRecord] = (), path: Optional[os.PathLike | str] = None):
        self.path = Path(path) if path is not None else None
        self.records: dict[Digest, PublisherRecord] = {r.fingerprint: r for r in records}

    @classmethod
    def load(cls, path: os.PathLike | str) -> "PublisherDirectory":
        path = Path(path)
        if not path.exists():
            return cls(path=path)
        doc = canonical_decode(path.read_bytes().rstrip(b"\n"))
        return cls((PublisherRecord.from_dict(r) for r in doc["publishers"].values()), path)

    def save(self) -> None:
        if self.path is None:
            return
        doc = {"publishers": {str(fp): r.to_dict() for fp, r in self.records.items()}}
        _atomic_write(self.path, canonical_encode(doc) + b"\n", mode=0o600)

    def register(
        self,
        public_key: bytes,
        namespaces: Iterable[str],
        publisher_id: Optional[str] = None,
        token: Optional[str] = None,
    ) -> PublisherRecord:
        if fingerprint(public_key) in self.records:
            raise ValueError(f"publisher {fingerprint(public_key)} is already registered")
        record = PublisherRecord(
            publisher_id=publisher_id or default_publisher_id(public_key),
            public_key=public_key,
            namespaces=tuple(sorted(check_namespace(ns) for ns in namespaces)),
            token_hash=sha256(token.encode("utf-8")) if token else None,
        )
        self.records[record.fingerprint] = record
        self.save()
        return record

    def get(self, fp: Digest) -> Optional[PublisherRecord]:
        return self.records.get(fp)

    def authorized(self, fp: Digest, namespace: str) -> bool:
        record = self.records.get(fp)
        return record is not None and namespace in record.namespaces

    def by_token(self, token: str) -> Optional[PublisherRecord]:
        digest = sha256(token.encode("utf-8")).value
        for record in self.records.values():
            if record.token_hash is not None and hmac.compare_digest(record.token_hash.value, digest):
                return record
        return None


# -- publish pipeline -----------------------------------------------------------


class PublishRejected(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


def publish(
    artifact: bytes,
    registry: RegistryIdentity,
    directory: PublisherDirectory,
    *,
    scan: Optional[ScanHook] = None,
    enforce_namespaces: bool = True,
    now: Optional[str] = None,
    clock_skew: int = 0,
) -> bytes:
    """Verify an uploaded artifact, countersign it, and return the attested bytes.

    Nothing is stored here; a rejection raises before any output exists.
    """
    try:
        env = read_envelope(artifact)
    except ArchiveError as exc:
        raise PublishRejected("malformed-envelope", str(exc)) from exc
    if env.published:
        raise PublishRejected("duplicate-attestation", "artifact already carries a registry attestation")
    manifest, sig = env.manifest, env.publisher_sig
    results: dict[str, bool] = {}

    # 1. publisher signature
    record = directory.get(sig.publisher_fingerprint)
    if record is None:
        raise PublishRejected("unknown-publisher", f"no registered publisher with fingerprint {sig.publisher_fingerprint}")
    if not verify_publisher_signature(env.raw["provenance.json"], sig, record.public_key):
        raise PublishRejected("bad-publisher-signature", "publisher signature does not verify over provenance.json")
    if sig.signed_at != manifest.build.timestamp:
        raise PublishRejected("bad-publisher-signature", "signed_at does not match the manifest build timestamp")
    accepted_at = now or utc_now()
    try:
        lag = (parse_time(accepted_at) - parse_time(sig.signed_at)).total_seconds()
    except ValueError as exc:
        raise PublishRejected("bad-publisher-signature", str(exc)) from exc
    if lag < -clock_skew:
        raise PublishRejected("signed-in-future", f"signed at {sig.signed_at}, registry time is {accepted_at}")
    results["publisher_signature"] = True

    # 2. content hash over the extracted sources
    try:
        sources = extract_contents(env, checked=True)
    except ArchiveError as exc:
        raise PublishRejected("content-hash-mismatch", str(exc)) from exc
    file_sums = {path: sha256(data) for path, data in sources}
    if file_sums != manifest.file_checksums:
        raise PublishRejected("content-hash-mismatch", "sources do not match the manifest file checksums")
    if compute_content_hash(manifest.name, manifest.version, manifest.pkg_id, sources) != manifest.content_hash:
        raise PublishRejected("content-hash-mismatch", "recomputed content hash differs from the manifest")
    results["content_hash"] = True

    # 3. namespace authorization
    if enforce_namespaces:
        if not directory.authorized(sig.publisher_fingerprint, manifest.namespace):
            raise PublishRejected("namespace-unauthorized", f"{record.publisher_id} may not publish into {manifest.namespace}")
        results["namespace_authorization"] = True

    # 4. optional scan hook
    if scan is not None:
        if not scan(manifest, sources):
            raise PublishRejected("scan-failed", "security scan rejected the artifact")
        results["security_scan"] = True

    # 5-6. attestation and countersignature
    attestation = Attestation(
        registry_id=registry.doc.registry_id,
        registry_url=registry.doc.registry_url,
        registry_fingerprint=registry.fingerprint,
        manifest_hash=sha256(env.raw["provenance.json"]),
        namespace=manifest.namespace,
        artifact_name=manifest.name,
        version=manifest.version,
        accepted_at=accepted_at,
        verification_results=results,
        contents_checksum=env.checksum,
        signature_hash=sha256(env.raw["signature.json"]),
    )
    signed = RegistryAttestation(attestation, registry.key_pair.sign(attestation.to_bytes()))
    logger.info("attested %s/%s %s", manifest.namespace, manifest.name, manifest.version)
    return inject_attestation(artifact, signed)


def attestation_of(artifact: bytes | PackagedArtifact) -> Optional[RegistryAttestation]:
    env = artifact if isinstance(artifact, PackagedArtifact) else read_envelope(artifact)
    return env.registry_attestation
