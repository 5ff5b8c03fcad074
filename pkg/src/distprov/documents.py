"""Signed envelope documents and the registry identity document."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .canonical import CanonicalError, Digest, b64decode, b64encode, canonical_decode, canonical_encode
from .identity import KeyMaterialError, decode_public_key, encode_public_key, fingerprint

# checks a registry may record in an attestation
CHECK_NAMES = ("publisher_signature", "content_hash", "namespace_authorization", "security_scan")


class DocumentError(ValueError):
    """A document failed to parse or is not in canonical form."""


def _decode(raw: bytes, what: str) -> dict:
    try:
        doc = canonical_decode(raw)
    except CanonicalError as exc:
        raise DocumentError(f"{what}: {exc}") from exc
    if not isinstance(doc, dict):
        raise DocumentError(f"{what}: expected a JSON object")
    return doc


def _roundtrip(obj, raw: bytes, what: str):
    if obj.to_bytes() != raw:
        raise DocumentError(f"{what}: fields do not round-trip to the stored bytes")
    return obj


@dataclass(frozen=True)
class PublisherSignature:
    signature: bytes
    publisher_fingerprint: Digest
    publisher_id: str
    signed_at: str

    def to_dict(self) -> dict:
        return {
            "publisher_fingerprint": str(self.publisher_fingerprint),
            "publisher_id": self.publisher_id,
            "signature": b64encode(self.signature),
            "signed_at": self.signed_at,
        }

    def to_bytes(self) -> bytes:
        return canonical_encode(self.to_dict())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PublisherSignature":
        d = _decode(raw, "signature.json")
        try:
            obj = cls(
                signature=b64decode(d["signature"]),
                publisher_fingerprint=Digest.parse(d["publisher_fingerprint"]),
                publisher_id=d["publisher_id"],
                signed_at=d["signed_at"],
            )
        except (KeyError, TypeError, CanonicalError) as exc:
            raise DocumentError(f"signature.json: {exc!r}") from exc
        return _roundtrip(obj, raw, "signature.json")


@dataclass(frozen=True)
class Attestation:
    """The registry's statement about an accepted artifact (the signed part)."""

    registry_id: str
    registry_url: str
    registry_fingerprint: Digest
    manifest_hash: Digest
    namespace: str
    artifact_name: str
    version: str
    accepted_at: str
    verification_results: dict
    # bind the remaining envelope documents so that any change to them is caught
    contents_checksum: Digest
    signature_hash: Digest

    def to_dict(self) -> dict:
        return {
            "accepted_at": self.accepted_at,
            "artifact_name": self.artifact_name,
            "contents_checksum": str(self.contents_checksum),
            "manifest_hash": str(self.manifest_hash),
            "namespace": self.namespace,
            "registry_fingerprint": str(self.registry_fingerprint),
            "registry_id": self.registry_id,
            "registry_url": self.registry_url,
            "signature_hash": str(self.signature_hash),
            "verification_results": dict(self.verification_results),
            "version": self.version,
        }

    def to_bytes(self) -> bytes:
        return canonical_encode(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Attestation":
        results = d["verification_results"]
        if not isinstance(results, dict) or not set(results) <= set(CHECK_NAMES):
            raise DocumentError(f"unknown verification_results keys: {results!r}")
        if not all(isinstance(v, bool) for v in results.values()):
            raise DocumentError("verification_results values must be booleans")
        return cls(
            registry_id=d["registry_id"],
            registry_url=d["registry_url"],
            registry_fingerprint=Digest.parse(d["registry_fingerprint"]),
            manifest_hash=Digest.parse(d["manifest_hash"]),
            namespace=d["namespace"],
            artifact_name=d["artifact_name"],
            version=d["version"],
            accepted_at=d["accepted_at"],
            verification_results=results,
            contents_checksum=Digest.parse(d["contents_checksum"]),
            signature_hash=Digest.parse(d["signature_hash"]),
        )


@dataclass(frozen=True)
class RegistryAttestation:
    attestation: Attestation
    signature: bytes

    def to_dict(self) -> dict:
        return {"attestation": self.attestation.to_dict(), "signature": b64encode(self.signature)}

    def to_bytes(self) -> bytes:
        return canonical_encode(self.to_dict())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RegistryAttestation":
        d = _decode(raw, "registry_attestation.json")
        try:
            obj = cls(Attestation.from_dict(d["attestation"]), b64decode(d["signature"]))
        except (KeyError, TypeError, CanonicalError) as exc:
            raise DocumentError(f"registry_attestation.json: {exc!r}") from exc
        return _roundtrip(obj, raw, "registry_attestation.json")


@dataclass(frozen=True)
class KeyPeriod:
    public_key: bytes
    fingerprint: Digest
    valid_from: str
    valid_until: str

    def to_dict(self) -> dict:
        return {
            "fingerprint": str(self.fingerprint),
            "public_key": encode_public_key(self.public_key),
            "valid_from": self.valid_from,
            "valid_until": self.valid_until,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyPeriod":
        return cls(decode_public_key(d["public_key"]), Digest.parse(d["fingerprint"]), d["valid_from"], d["valid_until"])


@dataclass(frozen=True)
class RegistryIdentityDoc:
    """Body of ``/.well-known/package-registry.json``."""

    registry_id: str
    registry_url: str
    public_key: bytes
    key_fingerprint: Digest
    namespaces: tuple[str, ...]
    parent_registry: Optional[str]
    key_valid_from: str
    key_rotation_history: tuple[KeyPeriod, ...] = ()

    def to_dict(self) -> dict:
        return {
            "key_fingerprint": str(self.key_fingerprint),
            "key_rotation_history": [p.to_dict() for p in self.key_rotation_history],
            "key_valid_from": self.key_valid_from,
            "namespaces": list(self.namespaces),
            "parent_registry": self.parent_registry,
            "public_key": encode_public_key(self.public_key),
            "registry_id": self.registry_id,
            "registry_url": self.registry_url,
        }

    def to_bytes(self) -> bytes:
        return canonical_encode(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RegistryIdentityDoc":
        try:
            doc = cls(
                registry_id=d["registry_id"],
                registry_url=d["registry_url"],
                public_key=decode_public_key(d["public_key"]),
                key_fingerprint=Digest.parse(d["key_fingerprint"]),
                namespaces=tuple(d["namespaces"]),
                parent_registry=d.get("parent_registry"),
                key_valid_from=d["key_valid_from"],
                key_rotation_history=tuple(KeyPeriod.from_dict(p) for p in d.get("key_rotation_history", [])),
            )
        except (KeyError, TypeError, CanonicalError, KeyMaterialError) as exc:
            raise DocumentError(f"registry identity document: {exc!r}") from exc
        doc.check()
        return doc

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RegistryIdentityDoc":
        return cls.from_dict(_decode(raw, "registry identity document"))

    def check(self) -> None:
        from ._time import parse_time

        if fingerprint(self.public_key) != self.key_fingerprint:
            raise DocumentError("key_fingerprint does not match public_key")
        prev_until = None
        for period in self.key_rotation_history:
            if fingerprint(period.public_key) != period.fingerprint:
                raise DocumentError("rotation history fingerprint does not match its key")
            if parse_time(period.valid_from) > parse_time(period.valid_until):
                raise DocumentError("rotation history period ends before it starts")
            if prev_until is not None and parse_time(period.valid_from) < prev_until:
                raise DocumentError("rotation history periods overlap or are out of order")
            prev_until = parse_time(period.valid_until)
        if prev_until is not None and parse_time(self.key_valid_from) < prev_until:
            raise DocumentError("current key becomes valid before the previous key expired")
