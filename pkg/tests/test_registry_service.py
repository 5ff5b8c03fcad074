from __future__ import annotations

import threading
import urllib.request

import pytest

from distprov.archive import read_envelope
from distprov.attestation import package_project, verify_attestation
from distprov.canonical import canonical_decode, canonical_encode, sha256
from distprov.client import HttpNetwork, LocalNetwork, RegistryError
from distprov.documents import RegistryAttestation
from distprov.fixtures import make_fixture_project, seeded_keypair, seeded_publisher
from distprov.identity import fingerprint
from distprov.registry_service import RegistryService, make_server, package_path
from distprov.verifier import VerificationContext, verify

from conftest import REGISTRY_EPOCH, SIGNED_AT

URL = "https://registry.acme.test"
ADMIN = "admin-secret"


def _clock():
    return "2026-03-01T12:00:05Z"


@pytest.fixture
def service(tmp_path):
    svc = RegistryService.create(
        tmp_path / "registry", "acme", URL, ["@acme"], admin_token=ADMIN,
        key_pair=seeded_keypair("svc"), now=REGISTRY_EPOCH, clock=_clock,
    )
    return svc


@pytest.fixture
def client(service):
    return LocalNetwork({URL: service})(URL)


def _publisher(client, label="alice", namespaces=("@acme",)):
    pub = seeded_publisher(label, label)
    client.register_publisher(ADMIN, pub.key_pair.public_key, namespaces, label, token=f"{label}-token")
    return pub


def _artifact(tmp_path, pub, version="1.0.0", namespace="@acme", name="utils"):
    proj = make_fixture_project(tmp_path / f"{pub.publisher_id}-{namespace}-{version}", version=version, namespace=namespace, name=name)
    return package_project(proj, pub, timestamp=SIGNED_AT)


def test_well_known_document(service, client):
    doc = client.well_known()
    assert doc.key_rotation_history == ()
    assert doc.key_fingerprint == fingerprint(doc.public_key)
    resp = service.handle("GET", "/.well-known/package-registry.json")
    assert resp.content_type == "application/json"
    assert canonical_encode(canonical_decode(resp.body)) == resp.body
    service.rotate(seeded_keypair("svc-2"), "2026-02-01T00:00:00Z")
    assert len(client.well_known().key_rotation_history) == 1


def test_publish_fetch_round_trip(tmp_path, service, client):
    pub = _publisher(client)
    art = _artifact(tmp_path, pub)
    att = RegistryAttestation.from_bytes(client.publish("@acme", "utils", "1.0.0", art, "alice-token"))
    fetched = client.fetch("@acme", "utils", "1.0.0")
    assert fetched == service.lookup("@acme", "utils", "1.0.0")
    env = read_envelope(fetched)
    assert env.registry_attestation == att
    ok, problems = verify_attestation(att, client.well_known())
    assert ok, problems
    ctx = VerificationContext(publisher_key=client.publisher_key(pub.fingerprint), registry_doc=client.well_known(), pinned=service.doc.key_fingerprint)
    assert verify(fetched, "strict", ctx).composite
    assert client.fetch("@acme", "utils", "1.0.0") == fetched


def test_republish_conflict_keeps_bytes(tmp_path, client, service):
    pub = _publisher(client)
    art = _artifact(tmp_path, pub)
    client.publish("@acme", "utils", "1.0.0", art, "alice-token")
    before = client.fetch("@acme", "utils", "1.0.0")
    with pytest.raises(RegistryError) as err:
        client.publish("@acme", "utils", "1.0.0", art, "alice-token")
    assert err.value.status == 409
    assert client.fetch("@acme", "utils", "1.0.0") == before


def test_status_mapping(tmp_path, client):
    alice = _publisher(client)
    mallory = _publisher(client, "mallory", ("@mallory",))
    cases = [
        (_artifact(tmp_path, alice), "wrong-token", 401),
        (_artifact(tmp_path, mallory), "mallory-token", 403),
        (_artifact(tmp_path, alice), "mallory-token", 401),
        (b"junk" * 300, "alice-token", 400),
    ]
    for body, token, status in cases:
        with pytest.raises(RegistryError) as err:
            client.publish("@acme", "utils", "1.0.0", body, token)
        assert err.value.status == status, err.value
    with pytest.raises(RegistryError) as err:
        client.publish("@acme", "utils", "2.0.0", _artifact(tmp_path, alice), "alice-token")
    assert (err.value.status, err.value.code) == (400, "path-mismatch")


def test_scan_rejection_is_422(tmp_path):
    svc = RegistryService.create(tmp_path / "r", "acme", URL, ["@acme"], admin_token=ADMIN, scan=lambda m, f: False)
    client = LocalNetwork({URL: svc})(URL)
    pub = _publisher(client)
    with pytest.raises(RegistryError) as err:
        client.publish("@acme", "utils", "1.0.0", _artifact(tmp_path, pub), "alice-token")
    assert (err.value.status, err.value.code) == (422, "scan-failed")


def test_version_listing(tmp_path, client):
    pub = _publisher(client)
    for v in ("1.10.0", "1.2.0"):
        client.publish("@acme", "utils", v, _artifact(tmp_path, pub, v), "alice-token")
    listed = client.list_versions("@acme", "utils")
    assert [e["version"] for e in listed] == ["1.2.0", "1.10.0"]
    for entry in listed:
        env = read_envelope(client.fetch("@acme", "utils", entry["version"]))
        assert entry["manifest_hash"] == str(sha256(env.raw["provenance.json"]))
    assert client.list_versions("@acme", "nothing") == []


def test_not_found_and_bad_routes(service):
    assert service.handle("GET", package_path("@acme", "utils", "1.0.0")).status == 404
    assert service.handle("GET", package_path("@acme", "utils")).status == 404
    assert service.handle("GET", "/nope").status == 404
    assert service.handle("GET", package_path("@acme", "utils", "latest")).status == 400
    assert service.handle("GET", package_path("acme", "utils")).status == 400
    assert service.handle("DELETE", package_path("@acme", "utils", "1.0.0")).status == 405


def test_publisher_registration(client):
    pub = seeded_publisher("bob", "bob")
    with pytest.raises(RegistryError) as err:
        client.register_publisher("not-admin", pub.key_pair.public_key, ["@acme"])
    assert err.value.status == 401
    doc = client.register_publisher(ADMIN, pub.key_pair.public_key, ["@acme"], "bob", token="t")
    assert doc["fingerprint"] == str(pub.fingerprint) and "token_hash" not in doc
    with pytest.raises(RegistryError) as err:
        client.register_publisher(ADMIN, pub.key_pair.public_key, ["@acme"])
    assert err.value.status == 409
    assert client.publisher_key(pub.fingerprint) == pub.key_pair.public_key


def test_state_survives_restart(tmp_path, service, client):
    pub = _publisher(client)
    client.publish("@acme", "utils", "1.0.0", _artifact(tmp_path, pub), "alice-token")
    again = RegistryService(service.root)
    assert again.doc == service.doc
    assert again.lookup("@acme", "utils", "1.0.0") == service.lookup("@acme", "utils", "1.0.0")
    assert again.directory.get(pub.fingerprint) is not None


def test_read_through_proxy(tmp_path, client):
    pub = _publisher(client)
    client.publish("@acme", "utils", "1.0.0", _artifact(tmp_path, pub), "alice-token")
    parent_bytes = client.fetch("@acme", "utils", "1.0.0")
    child = RegistryService.create(
        tmp_path / "child", "team", "https://team.test", ["@team"], parent=URL,
        upstream=lambda path: client.request("GET", path),
    )
    assert child.handle("GET", package_path("@acme", "utils", "1.0.0")).body == parent_bytes
    assert child.handle("GET", package_path("@acme", "utils")).status == 200
    # namespaces the child owns are never forwarded
    assert child.handle("GET", package_path("@team", "utils", "1.0.0")).status == 404


def test_http_server(tmp_path, service):
    server = make_server(service, "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_address[1]}"
        client = HttpNetwork(timeout=5)(url)
        pub = _publisher(client)
        art = _artifact(tmp_path, pub)
        client.publish("@acme", "utils", "1.0.0", art, "alice-token")
        assert client.fetch("@acme", "utils", "1.0.0") == service.lookup("@acme", "utils", "1.0.0")
        assert client.well_known() == service.doc
        with urllib.request.urlopen(url + package_path("@acme", "utils", "1.0.0")) as resp:
            assert resp.headers.get_content_type() == "application/octet-stream"
        with pytest.raises(RegistryError) as err:
            client.fetch("@acme", "utils", "9.9.9")
        assert err.value.status == 404
    finally:
        server.shutdown()
        server.server_close()


def test_concurrent_publish_first_wins(tmp_path, service, client):
    pub = _publisher(client)
    art = _artifact(tmp_path, pub)
    statuses = []

    def attempt():
        statuses.append(service.handle("POST", package_path("@acme", "utils", "1.0.0"), {"Authorization": "Bearer alice-token"}, art).status)

    threads = [threading.Thread(target=attempt) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(statuses) == [201] + [409] * 5
