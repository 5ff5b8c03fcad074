from __future__ import annotations

import dataclasses

import pytest

from distprov.archive import read_envelope, read_raw_entries, write_tar
from distprov.attestation import (
    NoKeyActive,
    PublisherDirectory,
    PublishRejected,
    active_key_at,
    attestation_of,
    package_project,
    publish,
    registry_init,
    rotate_key,
    sign_manifest,
    verify_attestation,
    verify_publisher_signature,
)
from distprov.canonical import sha256
from distprov.documents import Attestation, PublisherSignature, RegistryAttestation, RegistryIdentityDoc
from distprov.fixtures import make_fixture_project, seeded_keypair, seeded_publisher
from distprov.identity import fingerprint
from distprov.manifest import build_manifest

from conftest import ACCEPTED_AT, REGISTRY_EPOCH, SIGNED_AT

T0 = "2026-01-01T00:00:00Z"
T1 = "2026-06-01T00:00:00Z"


def test_publisher_signature_covers_manifest_bytes(tmp_path):
    pub = seeded_publisher("p")
    m = build_manifest(make_fixture_project(tmp_path), timestamp=SIGNED_AT)
    sig = sign_manifest(m, pub)
    assert sig.publisher_fingerprint == pub.fingerprint
    assert sig.signed_at == SIGNED_AT
    assert verify_publisher_signature(m.to_bytes(), sig, pub.key_pair.public_key)
    raw = bytearray(m.to_bytes())
    for i in (0, len(raw) // 2, len(raw) - 1):
        mutated = bytearray(raw)
        mutated[i] ^= 0x01
        assert not verify_publisher_signature(bytes(mutated), sig, pub.key_pair.public_key)
    assert not verify_publisher_signature(m.to_bytes(), sig, seeded_keypair("other").public_key)


def test_registry_init_document():
    reg = registry_init("acme", "https://r.test", ["@acme", "@tools"], key_pair=seeded_keypair("r"), now=T0)
    doc = reg.doc
    assert doc.key_fingerprint == fingerprint(doc.public_key)
    assert doc.namespaces == ("@acme", "@tools")
    assert doc.key_rotation_history == ()
    assert RegistryIdentityDoc.from_bytes(doc.to_bytes()) == doc
    with pytest.raises(ValueError):
        registry_init("x", "https://r.test", ["acme"])
    with pytest.raises(ValueError):
        registry_init("x", "https://r.test", ["@a", "@a"])


def test_rotation_and_active_key_boundaries():
    k1, k2, k3 = (seeded_keypair(f"k{i}") for i in range(3))
    doc = registry_init("acme", "https://r.test", ["@acme"], key_pair=k1, now=T0).doc
    doc = rotate_key(doc, k2, T1)
    doc = rotate_key(doc, k3, "2026-09-01T00:00:00Z")
    assert [p.public_key for p in doc.key_rotation_history] == [k1.public_key, k2.public_key]
    assert active_key_at(doc, T0) == k1.public_key
    assert active_key_at(doc, "2026-05-31T23:59:59Z") == k1.public_key
    assert active_key_at(doc, T1) == k2.public_key
    assert active_key_at(doc, "2026-09-01T00:00:00Z") == k3.public_key
    assert active_key_at(doc, "2030-01-01T00:00:00Z") == k3.public_key
    with pytest.raises(NoKeyActive):
        active_key_at(doc, "2025-12-31T23:59:59Z")
    with pytest.raises(ValueError):
        rotate_key(doc, seeded_keypair("k4"), T1)
    with pytest.raises(ValueError):
        rotate_key(doc, k3, "2027-01-01T00:00:00Z")


def test_identity_doc_invariants():
    doc = registry_init("acme", "https://r.test", ["@acme"], key_pair=seeded_keypair("r"), now=T0).doc
    with pytest.raises(ValueError):
        dataclasses.replace(doc, key_fingerprint=sha256(b"x")).check()


def test_publish_produces_bound_attestation(published):
    env = read_envelope(published.artifact)
    a = env.registry_attestation.attestation
    raw = env.raw
    assert a.manifest_hash == sha256(raw["provenance.json"])
    assert a.signature_hash == sha256(raw["signature.json"])
    assert a.contents_checksum == env.checksum
    assert a.registry_fingerprint == published.registry.fingerprint
    assert (a.namespace, a.artifact_name, a.version) == ("@acme", "utils", "1.0.0")
    assert a.accepted_at == ACCEPTED_AT
    assert a.verification_results == {"content_hash": True, "namespace_authorization": True, "publisher_signature": True}
    ok, problems = verify_attestation(
        env.registry_attestation, published.registry.doc, manifest_hash=a.manifest_hash, publisher_sig=env.publisher_sig
    )
    assert ok, problems


def test_attestation_roundtrip(published):
    att = attestation_of(published.artifact)
    assert RegistryAttestation.from_bytes(att.to_bytes()) == att
    assert Attestation.from_dict(att.attestation.to_dict()) == att.attestation


def test_verify_attestation_problems(published):
    att = attestation_of(published.artifact)
    doc = published.registry.doc
    other = registry_init("acme", doc.registry_url, ["@acme"], key_pair=seeded_keypair("impostor"), now=REGISTRY_EPOCH).doc
    ok, problems = verify_attestation(att, other)
    assert not ok and {p.code for p in problems} == {"fingerprint-mismatch", "bad-registry-signature"}

    forged = RegistryAttestation(dataclasses.replace(att.attestation, version="9.9.9"), att.signature)
    assert [p.code for p in verify_attestation(forged, doc)[1]] == ["bad-registry-signature"]

    ok, problems = verify_attestation(att, doc, manifest_hash=sha256(b"other"))
    assert [p.code for p in problems] == ["manifest-hash-mismatch"]

    late = PublisherSignature(b"\0" * 64, att.attestation.registry_fingerprint, "x", "2026-03-01T12:00:06Z")
    assert [p.code for p in verify_attestation(att, doc, publisher_sig=late)[1]] == ["temporal-order"]
    assert verify_attestation(att, doc, publisher_sig=late, clock_skew=5)[0]

    early = dataclasses.replace(doc, key_valid_from="2026-03-02T00:00:00Z")
    assert [p.code for p in verify_attestation(att, early)[1]] == ["no-key-active"]


def _fresh(tmp_path, **kw):
    pub = seeded_publisher("test-publisher")
    return package_project(make_fixture_project(tmp_path / "p", **kw), pub, timestamp=SIGNED_AT), pub


def test_publish_rejections(tmp_path, published):
    reg, directory = published.registry, published.directory
    with pytest.raises(PublishRejected) as err:
        publish(b"not a tar" * 100, reg, directory, now=ACCEPTED_AT)
    assert err.value.code == "malformed-envelope"

    with pytest.raises(PublishRejected) as err:
        publish(published.artifact, reg, directory, now=ACCEPTED_AT)
    assert err.value.code == "duplicate-attestation"

    with pytest.raises(PublishRejected) as err:
        publish(published.unpublished, reg, PublisherDirectory(), now=ACCEPTED_AT)
    assert err.value.code == "unknown-publisher"

    with pytest.raises(PublishRejected) as err:
        publish(published.unpublished, reg, directory, now="2026-03-01T11:59:59Z")
    assert err.value.code == "signed-in-future"
    publish(published.unpublished, reg, directory, now="2026-03-01T11:59:59Z", clock_skew=1)

    other_ns, _ = _fresh(tmp_path, namespace="@other")
    with pytest.raises(PublishRejected) as err:
        publish(other_ns, reg, directory, now=ACCEPTED_AT)
    assert err.value.code == "namespace-unauthorized"
    publish(other_ns, reg, directory, now=ACCEPTED_AT, enforce_namespaces=False)

    with pytest.raises(PublishRejected) as err:
        publish(published.unpublished, reg, directory, now=ACCEPTED_AT, scan=lambda m, files: False)
    assert err.value.code == "scan-failed"
    scanned = publish(published.unpublished, reg, directory, now=ACCEPTED_AT, scan=lambda m, files: True)
    assert attestation_of(scanned).attestation.verification_results["security_scan"] is True


def test_publish_rejects_tampered_parts(published):
    reg, directory = published.registry, published.directory
    raw = read_raw_entries(published.unpublished)
    order = ["provenance.json", "signature.json", "CHECKSUM", "contents.tar.gz"]

    bad_manifest = dict(raw)
    bad_manifest["provenance.json"] = raw["provenance.json"].replace(b'"1.0.0"', b'"1.0.1"', 1)
    with pytest.raises(PublishRejected) as err:
        publish(write_tar([(n, bad_manifest[n]) for n in order]), reg, directory, now=ACCEPTED_AT)
    assert err.value.code == "bad-publisher-signature"

    bad_contents = dict(raw)
    blob = bytearray(raw["contents.tar.gz"])
    blob[-12] ^= 0x01
    bad_contents["contents.tar.gz"] = bytes(blob)
    with pytest.raises(PublishRejected) as err:
        publish(write_tar([(n, bad_contents[n]) for n in order]), reg, directory, now=ACCEPTED_AT)
    assert err.value.code == "content-hash-mismatch"


def test_directory_persistence_and_tokens(tmp_path):
    path = tmp_path / "publishers.json"
    d = PublisherDirectory.load(path)
    key = seeded_keypair("p").public_key
    rec = d.register(key, ["@b", "@a"], publisher_id="alice", token="s3cret")
    assert rec.namespaces == ("@a", "@b")
    assert oct(path.stat().st_mode & 0o777) == "0o600"
    again = PublisherDirectory.load(path)
    assert again.get(fingerprint(key)) == rec
    assert again.by_token("s3cret") == rec and again.by_token("wrong") is None
    assert again.authorized(fingerprint(key), "@a") and not again.authorized(fingerprint(key), "@c")
    with pytest.raises(ValueError, match="already registered"):
        again.register(key, ["@a"])
