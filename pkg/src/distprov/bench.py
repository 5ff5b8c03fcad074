"""Latency and size measurements for verification and packaging."""
from __future__ import annotations

import statistics
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .archive import read_envelope
from .attestation import PublisherDirectory, package_project, publish, registry_init
from .canonical import canonical_encode, sha256
from .fixtures import make_fixture_project, seeded_keypair, seeded_publisher, source_size
from .identity import verify as ed25519_verify
from .ledger import ArtifactRef, Ledger
from .manifest import EvolutionAnchor, Lineage
from .verifier import VerificationContext, verify

SIGNED_AT = "2026-01-01T00:00:00Z"
ACCEPTED_AT = "2026-01-01T00:00:01Z"


@dataclass(frozen=True)
class Timing:
    name: str
    n: int
    median_ms: float
    mean_ms: float
    p99_ms: float

    def to_dict(self) -> dict:
        # canonical JSON carries no floats; report microseconds as integers
        return {
            "mean_us": round(self.mean_ms * 1000),
            "median_us": round(self.median_ms * 1000),
            "n": self.n,
            "name": self.name,
            "p99_us": round(self.p99_ms * 1000),
        }


def measure(name: str, fn: Callable[[], object], n: int = 50, warmup: int = 5) -> Timing:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(n):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1000)
    p99 = statistics.quantiles(samples, n=100, method="inclusive")[98] if n > 1 else samples[0]
    return Timing(name, n, statistics.median(samples), statistics.fmean(samples), p99)


class Fixture:
    """A published fixture artifact and everything needed to verify it."""

    def __init__(self, root: Path, modules: int):
        self.root = make_fixture_project(root / f"fixture-{modules}", modules=modules)
        self.publisher = seeded_publisher("bench-publisher")
        self.registry = registry_init("bench", "https://registry.bench.test", ["@acme"], key_pair=seeded_keypair("bench-registry"), now="2025-01-01T00:00:00Z")
        self.directory = PublisherDirectory()
        self.directory.register(self.publisher.key_pair.public_key, ["@acme"])
        self.ledger = Ledger(ledger_id="bench-ledger")
        event = self.ledger.append("created", ArtifactRef("utils", "@acme", "1.0.0"), sha256(b"bench"), SIGNED_AT)
        self.lineage = Lineage(evolution_anchor=EvolutionAnchor(self.ledger.ledger_id, event.event_hash))
        self.unpublished = package_project(self.root, self.publisher, timestamp=SIGNED_AT, lineage=self.lineage)
        self.artifact = publish(self.unpublished, self.registry, self.directory, now=ACCEPTED_AT)
        self.context = VerificationContext(
            self.publisher.key_pair.public_key, self.registry.doc, self.registry.fingerprint, ledger=self.ledger
        )

    def lifecycle(self) -> bool:
        data = package_project(self.root, self.publisher, timestamp=SIGNED_AT, lineage=self.lineage)
        attested = publish(data, self.registry, self.directory, now=ACCEPTED_AT)
        report = verify(attested, "strict", self.context)
        if not report.composite:
            raise AssertionError("lifecycle verification failed")
        return True


def verification_timings(n: int = 50, warmup: int = 5, modules: int = 4) -> list[Timing]:
    with tempfile.TemporaryDirectory() as tmp:
        fx = Fixture(Path(tmp), modules)
        out = [measure(f"verify-{mode}", lambda m=mode: verify(fx.artifact, m, fx.context), n, warmup) for mode in ("default", "strict", "full")]
        out.append(measure("lifecycle", fx.lifecycle, n, warmup))
    return out


def primitive_timings(n: int = 50, warmup: int = 5) -> list[Timing]:
    key = seeded_keypair("bench-primitive")
    msg = b"x" * 256
    sig = key.sign(msg)
    blobs = {size: bytes(size) for size in (1024, 10 * 1024, 100 * 1024)}
    small = {"name": "utils", "version": "1.0.0", "namespace": "@acme"}
    large = {"modules": [{"name": f"m{i}", "checksum": str(sha256(bytes([i]))), "schema": {"in": "x", "out": "y"}} for i in range(20)]}
    with tempfile.TemporaryDirectory() as tmp:
        fx = Fixture(Path(tmp), 4)
        return [
            measure("ed25519-sign", lambda: key.sign(msg), n, warmup),
            measure("ed25519-verify", lambda: ed25519_verify(key.public_key, msg, sig), n, warmup),
            *(measure(f"sha256-{size // 1024}KB", lambda b=b: sha256(b), n, warmup) for size, b in blobs.items()),
            measure("canonical-encode-small", lambda: canonical_encode(small), n, warmup),
            measure("canonical-encode-large", lambda: canonical_encode(large), n, warmup),
            measure("read-envelope", lambda: read_envelope(fx.artifact), n, warmup),
        ]


@dataclass(frozen=True)
class SizeRow:
    modules: int
    source_bytes: int
    artifact_bytes: int

    @property
    def overhead_pct(self) -> float:
        return 100.0 * (self.artifact_bytes - self.source_bytes) / self.source_bytes

    def to_dict(self) -> dict:
        return {
            "artifact_bytes": self.artifact_bytes,
            "modules": self.modules,
            "overhead_pct_x100": round(self.overhead_pct * 100),
            "source_bytes": self.source_bytes,
        }


def envelope_overhead(module_counts=(1, 4, 12)) -> list[SizeRow]:
    """Published artifact size against module source size."""
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for count in module_counts:
            fx = Fixture(Path(tmp), count)
            rows.append(SizeRow(count, source_size(fx.root), len(fx.artifact)))
    return rows


def format_timings(timings: list[Timing]) -> str:
    lines = [f"{'operation':<24}{'median':>12}{'mean':>12}{'p99':>12}"]
    for t in timings:
        lines.append(f"{t.name:<24}{t.median_ms:>10.3f}ms{t.mean_ms:>10.3f}ms{t.p99_ms:>10.3f}ms")
    return "\n".join(lines)


def format_sizes(rows: list[SizeRow]) -> str:
    lines = [f"{'modules':<10}{'source':>10}{'artifact':>12}{'overhead':>12}"]
    for r in rows:
        lines.append(f"{r.modules:<10}{r.source_bytes:>9}B{r.artifact_bytes:>11}B{r.overhead_pct:>11.0f}%")
    return "\n".join(lines)
