from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import pytest

from distprov.attestation import PublisherDirectory, package_project, publish, registry_init
from distprov.fixtures import make_fixture_project, seeded_keypair, seeded_publisher
from distprov.identity import PublisherIdentity
from distprov.ledger import ArtifactRef, Ledger
from distprov.manifest import EvolutionAnchor, Lineage
from distprov.verifier import VerificationContext

SIGNED_AT = "2026-03-01T12:00:00Z"
ACCEPTED_AT = "2026-03-01T12:00:05Z"
REGISTRY_EPOCH = "2026-01-01T00:00:00Z"

CRITERIA = {
    1: "tamper evidence across five mutation classes",
    2: "dependency-confusion defense matrix",
    3: "composite result is the conjunction of levels",
    4: "pack, publish, fetch, resolve, verify(full) round trip",
    5: "lineage mutation breaks exactly one link",
    6: "key rotation keeps old attestations verifiable",
    7: "verification and lifecycle latency",
    8: "envelope size and overhead trend",
    9: "byte-identical packing and canonical encoding",
    10: "TOFU accept, reject, and explicit update",
}

_results: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _results[crit].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report.criterion = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        outcomes = _results.get(n)
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {n:>2} {status:<7} {title} ({len(outcomes or [])} checks)")


# -- shared fixtures ------------------------------------------------------------


@dataclass
class Published:
    project: Path
    publisher: PublisherIdentity
    registry: object
    directory: PublisherDirectory
    ledger: Ledger
    unpublished: bytes
    artifact: bytes

    def context(self, **overrides) -> VerificationContext:
        kwargs = dict(
            publisher_key=self.publisher.key_pair.public_key,
            registry_doc=self.registry.doc,
            pinned=self.registry.fingerprint,
            ledger=self.ledger,
        )
        kwargs.update(overrides)
        return VerificationContext(**kwargs)


def make_published(root: Path, modules: int = 2, ledger_path: Path | None = None) -> Published:
    project = make_fixture_project(root / "project", modules=modules)
    publisher = seeded_publisher("test-publisher")
    registry = registry_init(
        "acme", "https://registry.acme.test", ["@acme"], key_pair=seeded_keypair("test-registry"), now=REGISTRY_EPOCH
    )
    directory = PublisherDirectory()
    directory.register(publisher.key_pair.public_key, ["@acme"])
    ledger = Ledger(ledger_path, ledger_id="dev-ledger")
    event = ledger.append("created", ArtifactRef("utils", "@acme", "1.0.0"), seeded_keypair("payload").fingerprint, SIGNED_AT)
    lineage = Lineage(evolution_anchor=EvolutionAnchor(ledger.ledger_id, event.event_hash))
    unpublished = package_project(project, publisher, timestamp=SIGNED_AT, lineage=lineage)
    artifact = publish(unpublished, registry, directory, now=ACCEPTED_AT)
    return Published(project, publisher, registry, directory, ledger, unpublished, artifact)


@pytest.fixture
def published(tmp_path) -> Published:
    return make_published(tmp_path)
