from __future__ import annotations

import stat
import threading

import pytest

from distprov.canonical import Digest
from distprov.identity import (
    EXPLICIT_UPDATE,
    KeyMaterialError,
    PinConflict,
    PublisherIdentity,
    TofuStore,
    decode_public_key,
    encode_public_key,
    fingerprint,
    generate_keypair,
    load_keypair,
    load_public_key,
    save_keypair,
    sign,
    tofu_check,
    verify,
)
from oracles import ed25519_ref

# RFC 8032 section 7.1, test 1
RFC_SEED = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
RFC_PUB = bytes.fromhex("d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a")
RFC_SIG = bytes.fromhex(
    "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b"
)
# frozen from the pure-Python reference implementation
ZERO_SEED_PUB = bytes.fromhex("3b6a27bcceb6a42d62a3a8d02a6f0d73653215771de243a63ac048a18b59da29")
ONES_SEED_PUB = bytes.fromhex("8a88e3dd7409f195fd52db2d3cba5d72ca6709bf1d94121bf3748801b40f6f5c")


def test_rfc8032_vector():
    kp = generate_keypair(RFC_SEED)
    assert kp.public_key == RFC_PUB
    assert kp.sign(b"") == RFC_SIG
    assert verify(RFC_PUB, b"", RFC_SIG)


@pytest.mark.parametrize("seed,expected", [(bytes(32), ZERO_SEED_PUB), (bytes([1]) * 32, ONES_SEED_PUB)])
def test_public_key_matches_reference(seed, expected):
    assert generate_keypair(seed).public_key == expected == ed25519_ref.public_key(seed)


def test_signatures_match_reference():
    seed = bytes(range(32))
    for msg in (b"", b"abc", bytes(300)):
        assert sign(seed, msg) == ed25519_ref.sign(seed, msg)


def test_verify_is_total():
    kp = generate_keypair(RFC_SEED)
    sig = kp.sign(b"m")
    assert not verify(kp.public_key, b"m2", sig)
    assert not verify(kp.public_key, b"m", sig[:-1])
    assert not verify(b"short", b"m", sig)
    assert not verify(kp.public_key, b"m", bytes(64))


def test_fingerprint_is_sha256_of_raw_key():
    assert fingerprint(RFC_PUB) == Digest.parse(
        "sha256:" + __import__("hashlib").sha256(RFC_PUB).hexdigest()
    )
    with pytest.raises(KeyMaterialError):
        fingerprint(b"x" * 31)


def test_public_key_text_roundtrip():
    text = encode_public_key(RFC_PUB)
    assert text.startswith("ed25519:")
    assert decode_public_key(text) == RFC_PUB
    for bad in ("ed25519:AAAA", "rsa:" + text[8:], text[8:]):
        with pytest.raises(KeyMaterialError):
            decode_public_key(bad)


def test_key_file_mode_and_roundtrip(tmp_path):
    path = tmp_path / "k.key"
    kp = generate_keypair()
    save_keypair(path, kp)
    assert stat.S_IMODE(path.stat().st_mode) == 0o600
    assert load_keypair(path) == kp
    assert load_public_key(str(path)) == kp.public_key
    assert load_public_key(encode_public_key(kp.public_key)) == kp.public_key


def test_publisher_identity_defaults():
    pub = PublisherIdentity.from_key_pair(generate_keypair(RFC_SEED))
    assert pub.publisher_id == "pub_" + pub.fingerprint.hex[:16]


def test_tofu_check():
    a, b = fingerprint(RFC_PUB), fingerprint(ZERO_SEED_PUB)
    assert tofu_check(a, a)
    assert tofu_check(str(a).upper().replace("SHA256", "sha256"), a)
    assert not tofu_check(a, b)


def test_pin_store_first_use_and_conflict(tmp_path):
    path = tmp_path / "pins.json"
    store = TofuStore.load(path)
    a, b = fingerprint(RFC_PUB), fingerprint(ZERO_SEED_PUB)
    store.pin("acme", "https://r", a, namespaces=["@acme"], now="2026-01-01T00:00:00Z")
    assert stat.S_IMODE(path.stat().st_mode) == 0o600
    assert store.pin("acme", "https://r", a).fingerprint == a
    with pytest.raises(PinConflict) as err:
        store.pin("acme", "https://r", b)
    assert err.value.pinned == a and err.value.offered == b
    assert str(a) in str(err.value) and str(b) in str(err.value)
    store.pin("acme", "https://r", b, namespaces=["@acme"], mode=EXPLICIT_UPDATE)
    reloaded = TofuStore.load(path)
    assert reloaded.get("acme").fingerprint == b
    assert reloaded.for_namespace("@acme")[0] == "acme"
    assert reloaded.for_namespace("@other") is None
    assert sorted(p.name for p in tmp_path.iterdir()) == ["pins.json", "pins.json.lock"]


def test_concurrent_first_use_pins_agree(tmp_path):
    path = tmp_path / "pins.json"
    fps = [fingerprint(generate_keypair(bytes([i]) * 32).public_key) for i in range(8)]
    winners, conflicts = [], []
    barrier = threading.Barrier(len(fps))

    def worker(fp):
        barrier.wait()
        try:
            winners.append(TofuStore(path).pin("acme", "https://r", fp).fingerprint)
        except PinConflict as exc:
            conflicts.append(exc.pinned)

    threads = [threading.Thread(target=worker, args=(fp,)) for fp in fps]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    final = TofuStore.load(path).get("acme").fingerprint
    # exactly one pin wins; every loser is told about that winner
    assert len(winners) == 1 and len(conflicts) == len(fps) - 1
    assert winners == [final]
    assert set(conflicts) == {final}
