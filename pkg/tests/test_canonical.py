from __future__ import annotations

import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distprov.canonical import (
    CanonicalError,
    Digest,
    b64decode,
    canonical_decode,
    canonical_encode,
    hash_canonical,
    sha256,
)
from oracles import canonical_ref

# frozen from the stdlib-json reference encoder and `sha256sum`
NAME_VERSION_BYTES = b'{"name":"acme/utils","version":"1.2.0"}'
NAME_VERSION_SHA = "2b1ee5b88233ba87d9ebeee720fefc3cf0a2cb18b7ae957943fe0b871aaf2c85"
EMPTY_MAP_DIGEST = "sha256:44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a"
ZEROS_32_DIGEST = "sha256:66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925"
EMPTY_DIGEST = "sha256:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"

json_scalars = st.none() | st.booleans() | st.integers(-(2**63), 2**63 - 1) | st.text()
json_values = st.recursive(
    json_scalars,
    lambda inner: st.lists(inner, max_size=5) | st.dictionaries(st.text(max_size=8), inner, max_size=5),
    max_leaves=25,
)


def test_key_order_and_no_whitespace():
    assert canonical_encode({"version": "1.2.0", "name": "acme/utils"}) == NAME_VERSION_BYTES
    assert hashlib.sha256(NAME_VERSION_BYTES).hexdigest() == NAME_VERSION_SHA


def test_frozen_digests():
    assert str(hash_canonical({})) == EMPTY_MAP_DIGEST
    assert str(sha256(bytes(32))) == ZEROS_32_DIGEST
    assert str(sha256(b"")) == EMPTY_DIGEST


def test_bytes_are_base64():
    assert canonical_encode({"k": b"\x00\xff"}) == b'{"k":"AP8="}'


def test_escapes_are_minimal():
    assert canonical_encode("é ") == '"é "'.encode("utf-8")
    assert canonical_encode('a"b\\c') == b'"a\\"b\\\\c"'
    assert canonical_encode("\n\t\x01") == b'"\\n\\t\\u0001"'


@pytest.mark.parametrize("bad", [1.5, float("nan"), 2**63, -(2**63) - 1, {1: "x"}, object()])
def test_unencodable_values(bad):
    with pytest.raises(CanonicalError):
        canonical_encode(bad)


@pytest.mark.parametrize(
    "raw",
    [b'{"b":1,"a":2}', b'{"a": 1}', b'{"a":1,"a":2}', b"1.0", b'{"a":1}\n', b'"\\u0041"'],
)
def test_strict_decode_rejects_noncanonical(raw):
    with pytest.raises(CanonicalError):
        canonical_decode(raw)


def test_lenient_decode_still_rejects_duplicates():
    assert canonical_decode(b'{"b": 1, "a": 2}', strict=False) == {"a": 2, "b": 1}
    with pytest.raises(CanonicalError):
        canonical_decode(b'{"a":1,"a":2}', strict=False)


@settings(max_examples=300)
@given(json_values)
def test_matches_reference_encoder(value):
    assert canonical_encode(value) == canonical_ref.encode(value)


@settings(max_examples=300)
@given(json_values)
def test_roundtrip(value):
    raw = canonical_encode(value)
    assert canonical_decode(raw) == value
    assert canonical_encode(canonical_decode(raw)) == raw


@given(st.dictionaries(st.text(max_size=6), st.integers(-(2**63), 2**63 - 1), min_size=1, max_size=12), st.randoms())
def test_insertion_order_is_irrelevant(d, rnd):
    items = list(d.items())
    rnd.shuffle(items)
    assert canonical_encode(dict(items)) == canonical_encode(d)


def test_digest_parse_and_format():
    d = Digest.parse(EMPTY_DIGEST.upper().replace("SHA256", "sha256"))
    assert str(d) == EMPTY_DIGEST
    for bad in ("sha256:abc", "md5:" + "0" * 64, "0" * 64, "sha256:" + "g" * 64):
        with pytest.raises(CanonicalError):
            Digest.parse(bad)


def test_base64_is_strict():
    assert b64decode("AP8=") == b"\x00\xff"
    for bad in ("AP8", "AP9=", "A P8=", "AP8=\n"):
        with pytest.raises(CanonicalError):
            b64decode(bad)
