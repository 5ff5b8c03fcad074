from __future__ import annotations

import dataclasses

import pytest

from distprov.canonical import ZERO_DIGEST, canonical_encode, hash_canonical, sha256
from distprov.ledger import ArtifactRef, ChainBroken, Ledger, LedgerError

REF = ArtifactRef("utils", "@acme", "1.0.0")


def _ledger(path=None, n=10):
    ledger = Ledger(path, ledger_id="dev")
    kinds = ["created", "edited", "tested", "promoted", "published"]
    for i in range(n):
        ledger.append(kinds[i % 5], REF, sha256(bytes([i])), f"2026-01-01T00:00:{i:02d}Z")
    return ledger


def test_genesis_and_links():
    ledger = _ledger(n=2)
    first, second = ledger.events
    assert first.prev_event_hash == ZERO_DIGEST
    assert second.prev_event_hash == first.event_hash
    body = first.to_dict()
    del body["event_hash"]
    assert hash_canonical(body) == first.event_hash


def test_persistence_roundtrip(tmp_path):
    path = tmp_path / "dev.jsonl"
    ledger = _ledger(path, n=4)
    again = Ledger(path)
    assert again.ledger_id == "dev"
    assert again.events == ledger.events
    assert again.verify() == (True, None)
    lines = path.read_bytes().splitlines()
    assert lines[0] == canonical_encode(ledger.events[0].to_dict())


def test_empty_ledger_verifies():
    assert Ledger().verify() == (True, None)


def test_every_single_event_mutation_is_caught():
    ledger = _ledger(n=10)
    for k in range(10):
        mutated = Ledger(ledger_id="dev")
        mutated.events = list(ledger.events)
        mutated.events[k] = dataclasses.replace(mutated.events[k], payload_hash=sha256(b"forged"))
        assert mutated.verify() == (False, k)


def test_rehashed_mutation_breaks_next_link():
    ledger = _ledger(n=5)
    forged = dataclasses.replace(ledger.events[2], payload_hash=sha256(b"forged"))
    forged = dataclasses.replace(forged, event_hash=forged.compute_hash())
    ledger.events[2] = forged
    assert ledger.verify() == (False, 3)


def test_anchor_lookup():
    ledger = _ledger(n=5)
    target = ledger.events[3]
    assert ledger.anchor_lookup("dev", target.event_hash) == target
    assert ledger.anchor_lookup("dev", sha256(b"random")) is None
    assert ledger.anchor_lookup("other", target.event_hash) is None
    ledger.events[1] = dataclasses.replace(ledger.events[1], timestamp="2030-01-01T00:00:00Z")
    with pytest.raises(ChainBroken) as err:
        ledger.anchor_lookup("dev", target.event_hash)
    assert err.value.index == 1


def test_unknown_kind_and_malformed_file(tmp_path):
    with pytest.raises(LedgerError):
        Ledger().append("deleted", REF, sha256(b""))
    path = tmp_path / "bad.jsonl"
    path.write_bytes(b"{not json}\n")
    with pytest.raises(LedgerError, match="malformed"):
        Ledger(path)
