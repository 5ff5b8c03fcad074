"""Canonical JSON encoding and SHA-256 digests.

Every signature and content hash in distprov is computed over the output of
:func:`canonical_encode`, so the encoding must stay bit-exact: UTF-8, object
keys sorted by code point (equivalently by UTF-8 bytes), no insignificant
whitespace, minimal string escapes, integers only.  Byte strings are carried
as standard base64 text.
"""
from __future__ import annotations

import base64
import hashlib
import json
import re
from dataclasses import dataclass
from typing import Any

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

_ESCAPE_RE = re.compile(r'["\\\x00-\x1f]')
_SHORT_ESCAPES = {
    '"': '\\"',
    "\\": "\\\\",
    "\b": "\\b",
    "\f": "\\f",
    "\n": "\\n",
    "\r": "\\r",
    "\t": "\\t",
}
_DIGEST_RE = re.compile(r"sha256:([0-9a-fA-F]{64})")


class CanonicalError(ValueError):
    """A value cannot be represented in (or parsed from) canonical form."""


@dataclass(frozen=True)
class Digest:
    """A SHA-256 digest rendered as ``sha256:<64 lowercase hex>``."""

    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != 32:
            raise CanonicalError(f"digest must be 32 bytes, got {len(self.value)}")

    @classmethod
    def parse(cls, text: str) -> "Digest":
        m = _DIGEST_RE.fullmatch(text) if isinstance(text, str) else None
        if m is None:
            raise CanonicalError(f"not a sha256 digest rendering: {text!r}")
        return cls(bytes.fromhex(m.group(1)))

    @property
    def hex(self) -> str:
        return self.value.hex()

    def __str__(self) -> str:
        return "sha256:" + self.value.hex()


ZERO_DIGEST = Digest(bytes(32))


def _escape(match: re.Match) -> str:
    ch = match.group()
    return _SHORT_ESCAPES.get(ch) or "\\u%04x" % ord(ch)


def _encode_str(text: str, out: list) -> None:
    out.append('"')
    out.append(_ESCAPE_RE.sub(_escape, text))
    out.append('"')


def _encode(value: Any, out: list) -> None:
    # bool is a subclass of int; test it first
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, int):
        if not INT64_MIN <= value <= INT64_MAX:
            raise CanonicalError(f"integer out of 64-bit range: {value}")
        out.append(str(value))
    elif isinstance(value, str):
        _encode_str(value, out)
    elif isinstance(value, (bytes, bytearray)):
        _encode_str(base64.b64encode(bytes(value)).decode("ascii"), out)
    elif isinstance(value, Digest):
        _encode_str(str(value), out)
    elif isinstance(value, dict):
        items = []
        for key, item in value.items():
            if not isinstance(key, str):
                raise CanonicalError(f"map keys must be text, got {type(key).__name__}")
            items.append((key, item))
        items.sort(key=lambda kv: kv[0])
        out.append("{")
        for i, (key, item) in enumerate(items):
            if i:
                out.append(",")
            _encode_str(key, out)
            out.append(":")
            _encode(item, out)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    elif isinstance(value, float):
        raise CanonicalError("floating point values are not allowed in signed documents")
    else:
        raise CanonicalError(f"unsupported type {type(value).__name__}")


def canonical_encode(value: Any) -> bytes:
    out: list[str] = []
    _encode(value, out)
    try:
        return "".join(out).encode("utf-8")
    except UnicodeEncodeError as exc:
        raise CanonicalError("text contains unpaired surrogates") from exc


def _no_duplicates(pairs):
    result = {}
    for key, value in pairs:
        if key in result:
            raise CanonicalError(f"duplicate map key {key!r}")
        result[key] = value
    return result


def _reject_float(text):
    raise CanonicalError(f"floating point literal {text!r} not allowed")


def canonical_decode(data: bytes, *, strict: bool = True) -> Any:
    """Parse canonical JSON bytes.

    With ``strict`` (the default) the input must already be in canonical form:
    re-encoding the parsed value has to reproduce ``data`` exactly.
    """
    try:
        text = data.decode("utf-8")
        value = json.loads(
            text,
            object_pairs_hook=_no_duplicates,
            parse_float=_reject_float,
            parse_constant=_reject_float,
        )
    except CanonicalError:
        raise
    except (UnicodeDecodeError, ValueError) as exc:
        raise CanonicalError(f"invalid JSON: {exc}") from exc
    if strict and canonical_encode(value) != data:
        raise CanonicalError("document is not in canonical form")
    return value


def sha256(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def hash_canonical(value: Any) -> Digest:
    return sha256(canonical_encode(value))


def b64decode(text: str) -> bytes:
    try:
        data = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, AttributeError, UnicodeEncodeError) as exc:
        raise CanonicalError(f"invalid base64 text: {text!r}") from exc
    # distinct texts must not decode to the same bytes
    if base64.b64encode(data).decode("ascii") != text:
        raise CanonicalError(f"non-canonical base64 text: {text!r}")
    return data


def b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")
