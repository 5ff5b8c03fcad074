"""Append-only, hash-chained evolution ledger backing lineage anchors.

Stored as newline-delimited canonical JSON, one event per line.  Each event
commits to its predecessor through ``prev_event_hash``; the genesis event
links to the all-zero digest.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from ._time import utc_now
from .canonical import ZERO_DIGEST, CanonicalError, Digest, canonical_decode, canonical_encode, hash_canonical

EVENT_KINDS = ("created", "edited", "tested", "promoted", "published")


class LedgerError(Exception):
    pass


class ChainBroken(LedgerError):
    def __init__(self, index: int):
        super().__init__(f"ledger hash chain broken at event {index}")
        self.index = index


@dataclass(frozen=True)
class ArtifactRef:
    name: str
    namespace: str
    version: str

    def to_dict(self) -> dict:
        return {"name": self.name, "namespace": self.namespace, "version": self.version}


@dataclass(frozen=True)
class LedgerEvent:
    event_id: str
    kind: str
    artifact: ArtifactRef
    payload_hash: Digest
    timestamp: str
    prev_event_hash: Digest
    event_hash: Digest

    def body(self) -> dict:
        return {
            "artifact": self.artifact.to_dict(),
            "event_id": self.event_id,
            "kind": self.kind,
            "payload_hash": str(self.payload_hash),
            "prev_event_hash": str(self.prev_event_hash),
            "timestamp": self.timestamp,
        }

    def compute_hash(self) -> Digest:
        return hash_canonical(self.body())

    def to_dict(self) -> dict:
        d = self.body()
        d["event_hash"] = str(self.event_hash)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LedgerEvent":
        a = d["artifact"]
        return cls(
            event_id=d["event_id"],
            kind=d["kind"],
            artifact=ArtifactRef(a["name"], a["namespace"], a["version"]),
            payload_hash=Digest.parse(d["payload_hash"]),
            timestamp=d["timestamp"],
            prev_event_hash=Digest.parse(d["prev_event_hash"]),
            event_hash=Digest.parse(d["event_hash"]),
        )


class Ledger:
    """A ledger file.  ``path=None`` keeps events in memory only."""

    def __init__(self, path: Optional[os.PathLike | str] = None, ledger_id: Optional[str] = None):
        self.path = Path(path) if path is not None else None
        if ledger_id is None:
            ledger_id = self.path.stem if self.path is not None else "ledger"
        self.ledger_id = ledger_id
        self.events: list[LedgerEvent] = []
        if self.path is not None and self.path.exists():
            self.events = list(self._read())

    def _read(self):
        for lineno, line in enumerate(self.path.read_bytes().splitlines(), 1):
            if not line.strip():
                continue
            try:
                yield LedgerEvent.from_dict(canonical_decode(line))
            except (CanonicalError, KeyError, TypeError) as exc:
                raise LedgerError(f"{self.path}:{lineno}: malformed event: {exc}") from exc

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    @property
    def head(self) -> Digest:
        return self.events[-1].event_hash if self.events else ZERO_DIGEST

    def append(
        self,
        kind: str,
        artifact: ArtifactRef,
        payload_hash: Digest,
        timestamp: Optional[str] = None,
    ) -> LedgerEvent:
        if kind not in EVENT_KINDS:
            raise LedgerError(f"unknown event kind {kind!r}; expected one of {', '.join(EVENT_KINDS)}")
        draft = LedgerEvent(
            event_id=f"evt_{len(self.events) + 1:06d}",
            kind=kind,
            artifact=artifact,
            payload_hash=payload_hash,
            timestamp=timestamp or utc_now(),
            prev_event_hash=self.head,
            event_hash=ZERO_DIGEST,
        )
        event = replace(draft, event_hash=draft.compute_hash())
        if self.path is not None:
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "ab") as fh:
                    fh.write(canonical_encode(event.to_dict()) + b"\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise LedgerError(f"cannot append to {self.path}: {exc}") from exc
        self.events.append(event)
        return event

    def verify(self) -> tuple[bool, Optional[int]]:
        """Return ``(ok, first_broken_index)``."""
        prev = ZERO_DIGEST
        for i, event in enumerate(self.events):
            if event.prev_event_hash != prev or event.compute_hash() != event.event_hash:
                return False, i
            prev = event.event_hash
        return True, None

    def anchor_lookup(self, ledger_id: str, event_hash: Digest) -> Optional[LedgerEvent]:
        """Find the anchored event; raises :class:`ChainBroken` on a bad chain."""
        ok, index = self.verify()
        if not ok:
            raise ChainBroken(index)
        if ledger_id != self.ledger_id:
            return None
        for event in self.events:
            if event.event_hash == event_hash:
                return event
        return None
