"""Ed25519 keys, fingerprints, and the consumer's TOFU pin store."""
from __future__ import annotations

import contextlib
import fcntl
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

from ._time import utc_now
from .canonical import CanonicalError, Digest, b64decode, b64encode, canonical_decode, canonical_encode, sha256

logger = logging.getLogger(__name__)

PUBLIC_KEY_PREFIX = "ed25519:"
_RAW = serialization.Encoding.Raw
_PROBE = b"distprov key self-check"


class KeyMaterialError(ValueError):
    """Malformed key material."""


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes = field(repr=False)  # 32-byte seed

    def sign(self, message: bytes) -> bytes:
        return sign(self.private_key, message)

    @property
    def fingerprint(self) -> Digest:
        return fingerprint(self.public_key)


def generate_keypair(seed: Optional[bytes] = None) -> KeyPair:
    if seed is None:
        priv = ed25519.Ed25519PrivateKey.generate()
    else:
        if len(seed) != 32:
            raise KeyMaterialError(f"seed must be 32 bytes, got {len(seed)}")
        priv = ed25519.Ed25519PrivateKey.from_private_bytes(seed)
    return KeyPair(
        public_key=priv.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw),
        private_key=priv.private_bytes(_RAW, serialization.PrivateFormat.Raw, serialization.NoEncryption()),
    )


def fingerprint(public_key: bytes) -> Digest:
    if len(public_key) != 32:
        raise KeyMaterialError(f"public key must be 32 bytes, got {len(public_key)}")
    return sha256(public_key)


def sign(private_key: bytes, message: bytes) -> bytes:
    if len(private_key) != 32:
        raise KeyMaterialError("private key seed must be 32 bytes")
    return ed25519.Ed25519PrivateKey.from_private_bytes(private_key).sign(message)


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Total: malformed keys or signatures yield False rather than raising."""
    if len(public_key) != 32 or len(signature) != 64:
        return False
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def encode_public_key(public_key: bytes) -> str:
    return PUBLIC_KEY_PREFIX + b64encode(public_key)


def decode_public_key(text: str) -> bytes:
    if not isinstance(text, str) or not text.startswith(PUBLIC_KEY_PREFIX):
        raise KeyMaterialError(f"expected 'ed25519:<base64>' public key, got {text!r}")
    try:
        raw = b64decode(text[len(PUBLIC_KEY_PREFIX):])
    except CanonicalError as exc:
        raise KeyMaterialError(str(exc)) from exc
    if len(raw) != 32:
        raise KeyMaterialError("public key must decode to 32 bytes")
    return raw


def save_keypair(path: os.PathLike | str, key_pair: KeyPair) -> None:
    """Write a key file readable only by the owner."""
    doc = {"public_key": encode_public_key(key_pair.public_key), "private_seed": b64encode(key_pair.private_key)}
    _atomic_write(Path(path), canonical_encode(doc) + b"\n", mode=0o600)


def load_keypair(path: os.PathLike | str) -> KeyPair:
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
        seed = b64decode(doc["private_seed"])
        public = decode_public_key(doc["public_key"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise KeyMaterialError(f"cannot read key file {path}: {exc}") from exc
    pair = generate_keypair(seed)
    if pair.public_key != public or not verify(public, _PROBE, pair.sign(_PROBE)):
        raise KeyMaterialError(f"key file {path}: public key does not match private seed")
    return pair


def load_public_key(path_or_text: str) -> bytes:
    """Accept an ``ed25519:`` string or the path of a key file holding one."""
    if path_or_text.startswith(PUBLIC_KEY_PREFIX):
        return decode_public_key(path_or_text)
    try:
        doc = json.loads(Path(path_or_text).read_text("utf-8"))
        return decode_public_key(doc["public_key"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise KeyMaterialError(f"cannot read public key from {path_or_text}: {exc}") from exc


@dataclass(frozen=True)
class PublisherIdentity:
    publisher_id: str
    key_pair: KeyPair

    @property
    def fingerprint(self) -> Digest:
        return self.key_pair.fingerprint

    @classmethod
    def from_key_pair(cls, key_pair: KeyPair, publisher_id: Optional[str] = None) -> "PublisherIdentity":
        return cls(publisher_id or default_publisher_id(key_pair.public_key), key_pair)


def default_publisher_id(public_key: bytes) -> str:
    return "pub_" + fingerprint(public_key).hex[:16]


def normalize_fingerprint(fp: Digest | str) -> Digest:
    return fp if isinstance(fp, Digest) else Digest.parse(fp.strip().lower())


def tofu_check(attested: Digest | str, pinned: Digest | str) -> bool:
    """Accept iff the attested registry fingerprint equals the pinned one."""
    return normalize_fingerprint(attested).value == normalize_fingerprint(pinned).value


# -- TOFU store ---------------------------------------------------------------


class PinConflict(Exception):
    def __init__(self, registry_id: str, pinned: Digest, offered: Digest):
        super().__init__(
            f"registry {registry_id!r} is pinned to {pinned} but presented {offered}; "
            "re-pin explicitly with --update if the key change is expected"
        )
        self.registry_id = registry_id
        self.pinned = pinned
        self.offered = offered


@dataclass(frozen=True)
class PinEntry:
    fingerprint: Digest
    pinned_at: str
    url: str
    namespaces: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "fingerprint": str(self.fingerprint),
            "namespaces": list(self.namespaces),
            "pinned_at": self.pinned_at,
            "url": self.url,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PinEntry":
        return cls(Digest.parse(d["fingerprint"]), d["pinned_at"], d["url"], tuple(d.get("namespaces", ())))


FIRST_USE = "first-use"
EXPLICIT_UPDATE = "explicit-update"


class TofuStore:
    """Pinned registry fingerprints, kept apart from the resolver config.

    The file is only ever replaced atomically, so readers see either the old
    or the new content.  A pinned entry also records the namespaces the
    registry claimed when it was pinned; the resolver enforces those pins even
    when the namespace binding in the project config has been lost.
    """

    def __init__(self, path: os.PathLike | str, entries: Optional[dict[str, PinEntry]] = None):
        self.path = Path(path)
        self.entries: dict[str, PinEntry] = dict(entries or {})

    @classmethod
    def load(cls, path: os.PathLike | str) -> "TofuStore":
        store = cls(path)
        store.reload()
        return store

    def reload(self) -> None:
        if not self.path.exists():
            self.entries = {}
            return
        doc = canonical_decode(self.path.read_bytes().rstrip(b"\n"))
        self.entries = {rid: PinEntry.from_dict(e) for rid, e in doc.get("entries", {}).items()}

    def to_dict(self) -> dict:
        return {"entries": {rid: e.to_dict() for rid, e in self.entries.items()}}

    def save(self) -> None:
        _atomic_write(self.path, canonical_encode(self.to_dict()) + b"\n", mode=0o600)

    @contextlib.contextmanager
    def _locked(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path.with_name(self.path.name + ".lock"), "a") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def get(self, registry_id: str) -> Optional[PinEntry]:
        return self.entries.get(registry_id)

    def for_namespace(self, namespace: str) -> Optional[tuple[str, PinEntry]]:
        for rid, entry in sorted(self.entries.items()):
            if namespace in entry.namespaces:
                return rid, entry
        return None

    def pin(
        self,
        registry_id: str,
        url: str,
        fp: Digest | str,
        *,
        namespaces: Iterable[str] = (),
        mode: str = FIRST_USE,
        now: Optional[str] = None,
    ) -> PinEntry:
        if mode not in (FIRST_USE, EXPLICIT_UPDATE):
            raise ValueError(f"unknown pin mode {mode!r}")
        fp = normalize_fingerprint(fp)
        with self._locked():
            # another process may have pinned since we loaded; validate against its pin
            self.reload()
            existing = self.entries.get(registry_id)
            if existing is not None and mode == FIRST_USE:
                if existing.fingerprint != fp:
                    raise PinConflict(registry_id, existing.fingerprint, fp)
                return existing
            entry = PinEntry(fp, now or utc_now(), url, tuple(namespaces))
            self.entries[registry_id] = entry
            self.save()
        logger.info("pinned %s (%s) to %s", registry_id, url, fp)
        return entry


def _atomic_write(path: Path, data: bytes, mode: int = 0o644) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, mode)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
